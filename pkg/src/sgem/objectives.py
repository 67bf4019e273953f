"""Unsupervised adaptation losses: generalized (Renyi) entropy and negative sampling.

All functions take log-domain scores shaped ``(rows, C)`` as torch tensors
(or anything ``torch.as_tensor`` accepts) and are differentiable with respect
to them, except where a selector is explicitly frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .core import AdaptationConfig, LogitMatrix, Vocabulary

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)
NEAR_ONE = 1e-6  # |alpha - 1| below this uses the series form of the Renyi entropy


@dataclass
class LossBreakdown:
    gem: float
    ns: float
    total: float
    frames_used: int
    masked_frames: int
    lambda_ns: float
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    @property
    def all_masked(self) -> bool:
        return self.frames_used == 0

    def as_dict(self) -> dict:
        return {"gem": self.gem, "ns": self.ns, "total": self.total,
                "frames_used": self.frames_used, "masked_frames": self.masked_frames}


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, LogitMatrix):
        return x.values
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _row_mask(mask, rows: int, device) -> torch.Tensor:
    if mask is None:
        return torch.ones(rows, dtype=torch.bool, device=device)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=device)
    if mask.shape != (rows,):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {rows} rows")
    return mask


def log_temperature_softmax(logits, T: float) -> torch.Tensor:
    return torch.log_softmax(_as_tensor(logits) / T, dim=-1)


def temperature_softmax(row, T: float) -> torch.Tensor:
    """exp(o/T) normalized over the last axis; max-subtraction is done by softmax."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    return torch.softmax(_as_tensor(row) / T, dim=-1)


def blank_argmax_mask(logits, vocab: Vocabulary) -> torch.Tensor:
    """True for rows whose argmax is *not* blank. Ties go to blank (masked out)."""
    values = _as_tensor(logits).detach()
    blank = values[:, vocab.blank_index]
    return blank < values.max(dim=-1).values


def _renyi_from_log_probs(log_p: torch.Tensor, alpha: float) -> torch.Tensor:
    log_p = log_p.clamp(min=_LOG_FLOOR)
    if alpha == 1:
        return -(log_p.exp() * log_p).sum(dim=-1)
    if abs(alpha - 1.0) < NEAR_ONE:
        # the quotient cancels catastrophically here; second-order expansion around alpha = 1
        p = log_p.exp()
        mean = (p * log_p).sum(dim=-1)
        var = (p * log_p ** 2).sum(dim=-1) - mean ** 2
        return -mean - 0.5 * (alpha - 1.0) * var
    return torch.logsumexp(alpha * log_p, dim=-1) / (1.0 - alpha)


def shannon_entropy(p) -> torch.Tensor:
    p = _as_tensor(p)
    return -(p * p.clamp(min=PROB_FLOOR).log()).sum(dim=-1)


def renyi_entropy(p, alpha: float) -> torch.Tensor:
    """Renyi entropy of order ``alpha`` over the last axis (Shannon at alpha == 1).

    Zero probabilities contribute nothing: p^alpha is evaluated as
    exp(alpha * log max(p, 1e-12)).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    p = _as_tensor(p)
    if alpha == 1:
        return shannon_entropy(p)
    return _renyi_from_log_probs(p.clamp(min=PROB_FLOOR).log(), alpha)


def gem_loss(logits, mask=None, alpha: float = 1.5, T: float = 2.5) -> torch.Tensor:
    """Mean Renyi entropy of the temperature-scaled rows selected by ``mask``.

    The mean runs over masked-in rows. With no rows selected the result is a
    constant zero.
    """
    values = _as_tensor(logits)
    keep = _row_mask(mask, values.shape[0], values.device)
    if not keep.any():
        return values.new_zeros(())
    ent = _renyi_from_log_probs(log_temperature_softmax(values[keep], T), alpha)
    return ent.mean()


def negative_classes(logits, tau: float) -> torch.Tensor:
    """Boolean (rows, C) selector of classes with untempered probability below ``tau``."""
    values = _as_tensor(logits).detach()
    return torch.softmax(values, dim=-1) < tau


def ns_loss(logits, mask=None, tau: float = 0.04, T: float = 2.5,
            negatives: Optional[torch.Tensor] = None) -> torch.Tensor:
    """-mean log(1 - sum of tempered mass on negative classes).

    Negatives are chosen on the temperature-1 distribution and carry no
    gradient. ``negatives`` overrides the selection (used to hold it fixed).
    """
    values = _as_tensor(logits)
    keep = _row_mask(mask, values.shape[0], values.device)
    if not keep.any():
        return values.new_zeros(())
    if negatives is None:
        negatives = negative_classes(values, tau)
    p = temperature_softmax(values[keep], T)
    penalized = (p * negatives[keep].to(p.dtype)).sum(dim=-1)
    return -torch.log((1.0 - penalized).clamp(min=PROB_FLOOR)).mean()


def combined_loss(logits, mask_gem, mask_ns, config: AdaptationConfig,
                  negatives: Optional[torch.Tensor] = None) -> LossBreakdown:
    """GEM + lambda_ns * NS, honoring the use_gem / use_ns toggles.

    ``breakdown.loss`` carries the differentiable total.
    """
    values = _as_tensor(logits)
    rows, num_classes = values.shape
    keep_gem = _row_mask(mask_gem, rows, values.device)
    keep_ns = _row_mask(mask_ns, rows, values.device)

    zero = values.new_zeros(())
    gem = gem_loss(values, keep_gem, config.alpha, config.T) if config.use_gem else zero
    ns = ns_loss(values, keep_ns, config.tau(num_classes), config.T, negatives) if config.use_ns else zero
    total = gem + config.lambda_ns * ns

    used = torch.zeros(rows, dtype=torch.bool, device=values.device)
    if config.use_gem:
        used |= keep_gem
    if config.use_ns:
        used |= keep_ns
    frames_used = int(used.sum())
    return LossBreakdown(
        gem=gem.item(), ns=ns.item(), total=gem.item() + config.lambda_ns * ns.item(),
        frames_used=frames_used, masked_frames=rows - frames_used,
        lambda_ns=config.lambda_ns, loss=total,
    )

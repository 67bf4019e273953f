"""Episodic single-utterance test-time adaptation.

For every utterance: decode, then for N iterations acquire logits, take an
AdamW step on GEM + lambda_ns * NS over the trainable groups with a cosine
learning rate, decode again, and restore the source parameters.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from . import acoustic
from .core import FRAME_SYNCHRONOUS, AdaptationConfig, Utterance, validate_config
from .decoding import acquire_logits, transcribe
from .evaluation import evaluate, score_pairs
from .lm import NGramLM
from .objectives import LossBreakdown, blank_argmax_mask, combined_loss

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
EPS = 1e-8


def cosine_lr(t: int, eta_i: float, eta_f: float, N: int) -> float:
    """eta_f + (eta_i - eta_f)(1 + cos(pi t / max(N-1, 1))) / 2; hits both endpoints exactly."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if t == 0:
        return eta_i
    if t == N - 1:
        return eta_f
    return eta_f + 0.5 * (eta_i - eta_f) * (1.0 + math.cos(math.pi * t / max(N - 1, 1)))


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: Dict[Tuple[str, str], torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[Tuple[str, str], torch.Tensor] = field(default_factory=dict)
    skipped: List[int] = field(default_factory=list)


def optimizer_step(model, gradients: acoustic.Gradients, lr: float, weight_decay: float = 0.0,
                   state: Optional[OptimizerState] = None, betas=BETAS, eps: float = EPS) -> OptimizerState:
    """One AdamW update on the parameters named in ``gradients``.

    Decay is decoupled: p <- p - lr * weight_decay * p, then the bias-corrected
    adaptive-moment step. A non-finite gradient skips the whole step and is
    recorded in ``state.skipped``.
    """
    state = state or OptimizerState()
    if not all(torch.isfinite(g).all() for g in gradients.tensors.values()):
        state.skipped.append(state.step)
        log.warning("non-finite gradient; skipping optimizer step %d", state.step)
        return state
    groups = acoustic.parameter_groups(model)
    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for key, grad in gradients.tensors.items():
            p = groups[key[0]][key[1]]
            m = state.exp_avg.setdefault(key, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(key, torch.zeros_like(p))
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bias2).sqrt_().add_(eps)
            p.addcdiv_(m / bias1, denom, value=-lr)
    return state


@dataclass
class AdaptationResult:
    utterance_id: str
    transcript_before: str
    transcript_after: str
    loss_trajectory: List[LossBreakdown]
    fallback_used: bool
    wall_time: float
    learning_rates: List[float] = field(default_factory=list)
    hypotheses: List[str] = field(default_factory=list)

    def same_outcome(self, other: "AdaptationResult") -> bool:
        """Equality on everything except wall time."""
        return (self.utterance_id == other.utterance_id
                and self.transcript_before == other.transcript_before
                and self.transcript_after == other.transcript_after
                and [b.as_dict() for b in self.loss_trajectory] == [b.as_dict() for b in other.loss_trajectory]
                and self.fallback_used == other.fallback_used
                and self.learning_rates == other.learning_rates)


def _inference(model, utterance, lm, config: AdaptationConfig) -> str:
    return transcribe(model, utterance, config.inference_decode, lm, config.beam_width, config.lambda_lm)


def adapt_utterance(model, lm: Optional[NGramLM], utterance: Utterance, config: AdaptationConfig,
                    source: Optional[acoustic.ModelSnapshot] = None) -> AdaptationResult:
    """Adapt ``model`` to one utterance, report transcripts before/after, and reset.

    ``source`` is the snapshot restored at the end; by default the parameters
    at call time.
    """
    validate_config(config, require_objective=False)
    started = time.perf_counter()
    source = source or acoustic.snapshot(model)
    groups = config.groups_for(model.mode)
    frame_mode = model.mode == FRAME_SYNCHRONOUS

    before = _inference(model, utterance, lm, config)
    trajectory: List[LossBreakdown] = []
    lrs: List[float] = []
    hyps: List[str] = []
    fallback = False
    state = OptimizerState()
    fixed = None
    try:
        for t in range(config.N):
            if config.reacquire_every_step or fixed is None:
                acq = acquire_logits(model, lm, utterance, config)
                fixed = acq
            else:
                acq = _reuse_acquisition(model, utterance, fixed)
            fallback |= acq.fallback
            hyps.append(model.vocab.decode(acq.hypothesis))
            mask_gem, mask_ns = acq.mask, acq.mask
            if frame_mode and (config.blank_mask_gem or config.blank_mask_ns):
                not_blank = blank_argmax_mask(acq.logits, model.vocab)
                if config.blank_mask_gem:
                    mask_gem = mask_gem & not_blank
                if config.blank_mask_ns:
                    mask_ns = mask_ns & not_blank
            breakdown = combined_loss(acq.logits, mask_gem, mask_ns, config)
            loss = breakdown.loss
            breakdown.loss = None
            trajectory.append(breakdown)
            if breakdown.all_masked or not loss.requires_grad:
                continue
            lr = cosine_lr(t, config.eta_i, config.eta_f, config.N)
            grads = acoustic.backward(model, loss, groups)
            optimizer_step(model, grads, lr, config.weight_decay, state)
            lrs.append(lr)
        after = _inference(model, utterance, lm, config) if config.N > 0 else before
    finally:
        acoustic.restore(model, source)
    return AdaptationResult(utterance.id, before, after, trajectory, fallback,
                            time.perf_counter() - started, lrs, hyps)


def _reuse_acquisition(model, utterance, previous):
    from .decoding import Acquisition
    if model.mode == FRAME_SYNCHRONOUS:
        logits = acoustic.forward_frames(model, utterance)
    else:
        logits = acoustic.teacher_forced_logits(model, utterance, previous.hypothesis) \
            if previous.hypothesis else previous.logits
    return Acquisition(logits, previous.mask, previous.hypothesis, previous.fallback)


# -- corpus drivers ------------------------------------------------------------------------

_WORKER = {}


def _worker_init(ckpt: bytes, lm_rows, lm_order, config):
    torch.set_num_threads(1)
    model = acoustic.model_from_bytes(ckpt)
    lm = None if lm_rows is None else NGramLM(lm_order, model.vocab, lm_rows)
    _WORKER.update(model=model, lm=lm, config=config, source=acoustic.snapshot(model))


def _worker_adapt(utterance):
    w = _WORKER
    return adapt_utterance(w["model"], w["lm"], utterance, w["config"], w["source"])


def adapt_corpus(model, lm: Optional[NGramLM], utterances: Sequence[Utterance], config: AdaptationConfig,
                 jobs: int = 1) -> List[AdaptationResult]:
    """Adapt every utterance independently; results follow input order.

    With ``jobs > 1`` each worker process holds its own model clone; the
    checkpoint round trip is bit-exact so results match the serial path.
    """
    utterances = list(utterances)
    if jobs <= 1 or len(utterances) <= 1:
        source = acoustic.snapshot(model)
        return [adapt_utterance(model, lm, u, config, source) for u in utterances]
    ckpt = acoustic.checkpoint_bytes(model)
    lm_args = (None, None) if lm is None else (lm.rows, lm.order)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(ckpt, *lm_args, config)) as pool:
        return list(pool.map(_worker_adapt, utterances, chunksize=4))


ABLATION_ROWS = (
    (False, False, False),
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, False, True),
    (True, True, True),
)


@dataclass
class AblationRow:
    beam_search: bool
    gem: bool
    ns: bool
    wer: float


def run_ablation(model, lm: Optional[NGramLM], utterances: Sequence[Utterance],
                 base_config: AdaptationConfig, jobs: int = 1) -> List[AblationRow]:
    """Corpus WER for each (BS, GEM, NS) toggle row; the first row is the frozen model."""
    utterances = list(utterances)
    if any(u.reference is None for u in utterances):
        raise ValueError("missing references: ablation needs a reference for every utterance")
    refs = [u.reference for u in utterances]
    rows = []
    for bs, gem, ns in ABLATION_ROWS:
        if not (gem or ns):
            report = evaluate(model, utterances, base_config.inference_decode, lm,
                              base_config.beam_width, base_config.lambda_lm)
        else:
            config = base_config.replace(use_beam_search=bs, use_gem=gem, use_ns=ns)
            results = adapt_corpus(model, lm, utterances, config, jobs)
            report = score_pairs(refs, [r.transcript_after for r in results])
        rows.append(AblationRow(bs, gem, ns, report.wer))
    return rows

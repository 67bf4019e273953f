"""Shared value types, adaptation config, and seeding helpers."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

TokenSequence = Tuple[int, ...]

FRAME_SYNCHRONOUS = "frame_synchronous"
AUTOREGRESSIVE = "autoregressive"
MODES = (FRAME_SYNCHRONOUS, AUTOREGRESSIVE)

WORD_DELIMITER = "|"
NORMALIZATION_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory. ``blank_index`` names the CTC blank; in autoregressive
    mode the same slot is read as end-of-sequence."""

    tokens: Tuple[str, ...]
    blank_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if any(not t for t in self.tokens):
            raise ValueError("empty token string")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings")
        if not 0 <= self.blank_index < len(self.tokens):
            raise ValueError(f"blank_index {self.blank_index} out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> str:
        return self.tokens[self.blank_index]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(("<b>", WORD_DELIMITER) + tuple("abcdefgh"), blank_index=0)

    def encode(self, text: str) -> TokenSequence:
        # longest match first so multi-character tokens win over their prefixes
        lookup = {t: i for i, t in enumerate(self.tokens) if i != self.blank_index}
        longest = max(len(t) for t in lookup)
        ids, pos = [], 0
        while pos < len(text):
            for width in range(min(longest, len(text) - pos), 0, -1):
                idx = lookup.get(text[pos:pos + width])
                if idx is not None:
                    ids.append(idx)
                    pos += width
                    break
            else:
                raise ValueError(f"untokenizable text at offset {pos}: {text[pos:pos + 10]!r}")
        return tuple(ids)

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.blank_index)


def to_words(transcript: str) -> str:
    """Token string -> whitespace-delimited words for WER."""
    return " ".join(w for w in transcript.split(WORD_DELIMITER) if w)


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    features: np.ndarray
    reference: Optional[str] = None

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"utterance {self.id}: features must be frames x dim, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"utterance {self.id}: non-finite features")
        object.__setattr__(self, "features", feats)

    @property
    def frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class LogitMatrix:
    """L x C log-domain scores. ``normalized`` means every row is a log-distribution."""

    values: torch.Tensor
    normalized: bool = True

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            object.__setattr__(self, "values", torch.as_tensor(np.asarray(self.values, dtype=np.float64)))
        if self.values.ndim != 2:
            raise ValueError("logit matrix must be 2-D")
        if not torch.isfinite(self.values).all():
            raise ValueError("non-finite logit entries")
        if self.normalized and self.values.numel():
            drift = float(self.row_logsumexp().__abs__().max())
            if drift > NORMALIZATION_TOL:
                raise ValueError(f"rows are not log-distributions (max |logsumexp| = {drift:.2e})")

    @property
    def shape(self):
        return tuple(self.values.shape)

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().double().numpy()

    def row_logsumexp(self) -> np.ndarray:
        return torch.logsumexp(self.values.detach().double(), dim=-1).cpu().numpy()


@dataclass(frozen=True)
class Hypothesis:
    sequence: TokenSequence
    am_score: float
    lm_score: float
    lambda_lm: float

    @property
    def fused_score(self) -> float:
        return self.am_score + self.lambda_lm * self.lm_score


_BOOL_FIELDS = ("use_beam_search", "use_gem", "use_ns", "blank_mask_gem", "blank_mask_ns",
                "reacquire_every_step")


@dataclass(frozen=True)
class AdaptationConfig:
    """Every knob of the adaptation loop. Defaults are the CTC-model settings;
    ``trainable_groups=None`` means the per-mode default group."""

    N: int = 10
    T: float = 2.5
    tau_scale: float = 0.4
    alpha: float = 1.5
    lambda_ns: float = 1.0
    lambda_lm: float = 0.3
    beam_width: int = 5
    eta_i: float = 4e-5
    eta_f: float = 2e-5
    weight_decay: float = 0.0
    trainable_groups: Optional[frozenset] = None
    use_beam_search: bool = True
    use_gem: bool = True
    use_ns: bool = True
    blank_mask_gem: bool = True
    blank_mask_ns: bool = False
    reacquire_every_step: bool = True
    inference_decode: str = "greedy"
    seed: int = 0

    def __post_init__(self):
        if self.trainable_groups is not None:
            groups = self.trainable_groups
            if isinstance(groups, str):
                groups = [g for g in groups.split(",") if g.strip()]
            object.__setattr__(self, "trainable_groups", frozenset(g.strip() for g in groups))

    def tau(self, num_classes: int) -> float:
        return self.tau_scale / num_classes

    def replace(self, **changes) -> "AdaptationConfig":
        return dataclasses.replace(self, **changes)

    def groups_for(self, mode: str) -> frozenset:
        if self.trainable_groups is not None:
            return self.trainable_groups
        return default_trainable_groups(mode)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "trainable_groups":
                text = "" if value is None else ",".join(sorted(value))
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["AdaptationConfig"] = None) -> "AdaptationConfig":
        values = parse_key_values(text)
        return (base or cls()).with_overrides(values)

    def with_overrides(self, values: dict) -> "AdaptationConfig":
        names = {f.name for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw)
        return dataclasses.replace(self, **changes)


def default_trainable_groups(mode: str) -> frozenset:
    if mode == FRAME_SYNCHRONOUS:
        return frozenset({"feature_extractor"})
    if mode == AUTOREGRESSIVE:
        return frozenset({"encoder"})
    raise ValueError(f"unknown mode {mode!r}")


def parse_key_values(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = raw.strip()
    return values


def _coerce(key, raw):
    if not isinstance(raw, str):
        return raw
    if key == "trainable_groups":
        return None if raw in ("", "auto", "none") else frozenset(g.strip() for g in raw.split(",") if g.strip())
    if key in _BOOL_FIELDS:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in ("N", "beam_width", "seed"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if key == "inference_decode":
        return raw
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def validate_config(config: AdaptationConfig, require_objective: bool = True) -> AdaptationConfig:
    """Return ``config`` unchanged, or raise ConfigError naming the first broken invariant.

    ``require_objective=False`` admits the all-toggles-off configuration used
    as the unadapted control run.
    """
    c = config
    if not isinstance(c.N, int) or c.N < 0:
        raise ConfigError("N must be a non-negative integer")
    if not c.T > 0:
        raise ConfigError("T must be positive")
    if not c.tau_scale > 0:
        raise ConfigError("tau_scale must be positive")
    if not c.alpha > 0:
        raise ConfigError("alpha must be positive")
    if c.alpha == 1:
        raise ConfigError("alpha must differ from 1")
    if c.lambda_ns < 0:
        raise ConfigError("lambda_ns must be non-negative")
    if c.lambda_lm < 0:
        raise ConfigError("lambda_lm must be non-negative")
    if not isinstance(c.beam_width, int) or c.beam_width < 1:
        raise ConfigError("beam_width must be a positive integer")
    if not (c.eta_i > 0 and c.eta_f > 0):
        raise ConfigError("learning rates must be positive")
    if c.eta_f > c.eta_i:
        raise ConfigError("eta_f must not exceed eta_i")
    if c.weight_decay < 0:
        raise ConfigError("weight_decay must be non-negative")
    if require_objective and c.N > 0 and not (c.use_gem or c.use_ns):
        raise ConfigError("at least one of use_gem/use_ns must be enabled when N > 0")
    if c.trainable_groups is not None and not c.trainable_groups:
        raise ConfigError("trainable_groups must not be empty")
    if c.inference_decode not in ("greedy", "beam"):
        raise ConfigError("inference_decode must be 'greedy' or 'beam'")
    for name in ("T", "tau_scale", "alpha", "lambda_ns", "lambda_lm", "eta_i", "eta_f", "weight_decay"):
        if not math.isfinite(getattr(c, name)):
            raise ConfigError(f"{name} must be finite")
    return config


def load_config(path, base: Optional[AdaptationConfig] = None) -> AdaptationConfig:
    return validate_config(AdaptationConfig.from_text(Path(path).read_text(encoding="utf-8"), base))


def save_config(config: AdaptationConfig, path) -> None:
    Path(path).write_text(config.to_text(), encoding="utf-8")


def stable_seed(*parts) -> int:
    """Process-independent 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen

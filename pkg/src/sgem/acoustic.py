"""Reference acoustic models and the model-facing operations of the adaptation loop.

Two small models share a strided convolution front end
(``feature_extractor``) and a bidirectional GRU (``encoder``):

* ``FrameModel`` adds an affine ``head`` and emits one log-distribution per
  output frame (CTC).
* ``ARModel`` adds an attention GRU ``decoder`` with token embeddings and a
  ``head`` over [decoder state, context]; the blank slot doubles as
  end-of-sequence.

Parameter groups are the top-level submodule names.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (AUTOREGRESSIVE, FRAME_SYNCHRONOUS, LogitMatrix, TokenSequence, Utterance,
                   Vocabulary)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGEMC1"
STRIDE = 2


def conv_output_length(frames: int) -> int:
    # odd kernel k, padding k // 2, stride 2
    return (frames - 1) // STRIDE + 1


class _FrontEnd(nn.Module):
    """Strided conv followed by ``depth - 1`` same-length convs, tanh after each."""

    def __init__(self, feature_dim: int, channels: int, depth: int = 1, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("front-end kernel width must be odd")
        self.conv = nn.Conv1d(feature_dim, channels, kernel_size=kernel, stride=STRIDE, padding=kernel // 2)
        self.stack = nn.ModuleList(nn.Conv1d(channels, channels, kernel_size=kernel, padding=kernel // 2)
                                   for _ in range(depth - 1))

    def forward(self, x):  # (B, T, D) -> (B, L, channels)
        h = torch.tanh(self.conv(x.transpose(1, 2)))
        for conv in self.stack:
            h = torch.tanh(conv(h))
        return h.transpose(1, 2)


class _Encoder(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.rnn = nn.GRU(channels, hidden, batch_first=True, bidirectional=True)

    def forward(self, x, lengths=None):
        if lengths is None or bool((lengths == x.shape[1]).all()):
            out, _ = self.rnn(x)
            return out
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class FrameModel(nn.Module):
    mode = FRAME_SYNCHRONOUS

    def __init__(self, vocab: Vocabulary, feature_dim: int, channels: int = 64, hidden: int = 64,
                 depth: int = 1, kernel: int = 3):
        super().__init__()
        self.vocab = vocab
        self.hparams = {"feature_dim": feature_dim, "channels": channels, "hidden": hidden, "depth": depth,
                        "kernel": kernel}
        self.feature_extractor = _FrontEnd(feature_dim, channels, depth, kernel)
        self.encoder = _Encoder(channels, hidden)
        self.head = nn.Linear(2 * hidden, vocab.size)

    def output_lengths(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - 1) // STRIDE + 1

    def forward(self, x, lengths=None):
        """(B, T, D) features -> (B, L, C) log-probabilities and output lengths."""
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        out_lengths = self.output_lengths(lengths)
        h = self.encoder(self.feature_extractor(x), out_lengths)
        return torch.log_softmax(self.head(h), dim=-1), out_lengths


class _AttentionDecoder(nn.Module):
    def __init__(self, vocab_size: int, enc_dim: int, hidden: int, embed: int, attn: int):
        super().__init__()
        self.bos = vocab_size
        self.embedding = nn.Embedding(vocab_size + 1, embed)
        self.init = nn.Linear(enc_dim, hidden)
        self.cell = nn.GRUCell(embed + enc_dim, hidden)
        self.query = nn.Linear(hidden, attn, bias=False)
        self.key = nn.Linear(enc_dim, attn, bias=False)
        self.scale = 1.0 / math.sqrt(attn)

    def attend(self, h, keys, enc, enc_mask):
        scores = torch.einsum("bla,ba->bl", keys, self.query(h)) * self.scale
        if enc_mask is not None:
            scores = scores.masked_fill(~enc_mask, -1e9)
        weights = torch.softmax(scores, dim=-1)
        return torch.einsum("bl,bld->bd", weights, enc)


class ARModel(nn.Module):
    mode = AUTOREGRESSIVE

    def __init__(self, vocab: Vocabulary, feature_dim: int, channels: int = 64, hidden: int = 64,
                 dec_hidden: int = 64, embed: int = 32, attn: int = 32):
        super().__init__()
        self.vocab = vocab
        self.hparams = {"feature_dim": feature_dim, "channels": channels, "hidden": hidden,
                        "dec_hidden": dec_hidden, "embed": embed, "attn": attn}
        self.feature_extractor = _FrontEnd(feature_dim, channels)
        self.encoder = _Encoder(channels, hidden)
        self.decoder = _AttentionDecoder(vocab.size, 2 * hidden, dec_hidden, embed, attn)
        self.head = nn.Linear(dec_hidden + 2 * hidden, vocab.size)

    def output_lengths(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - 1) // STRIDE + 1

    def encode(self, x, lengths=None):
        """Returns (enc, keys, enc_mask, initial state)."""
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        out_lengths = self.output_lengths(lengths)
        enc = self.encoder(self.feature_extractor(x), out_lengths)
        mask = torch.arange(enc.shape[1])[None, :] < out_lengths[:, None]
        mean = (enc * mask[..., None]).sum(1) / out_lengths[:, None].to(enc.dtype)
        h0 = torch.tanh(self.decoder.init(mean))
        ctx0 = torch.zeros_like(mean)
        return enc, self.decoder.key(enc), mask, (h0, ctx0)

    def step(self, memory, state, tokens):
        """One decoder step. ``tokens`` (B,) are previous outputs (``decoder.bos`` at start)."""
        enc, keys, mask = memory
        h, ctx = state
        h = self.decoder.cell(torch.cat([self.decoder.embedding(tokens), ctx], dim=-1), h)
        ctx = self.decoder.attend(h, keys, enc, mask)
        logp = torch.log_softmax(self.head(torch.cat([h, ctx], dim=-1)), dim=-1)
        return logp, (h, ctx)

    def forward(self, x, lengths, inputs):
        """Teacher-forced log-probabilities (B, S, C) for previous-token inputs (B, S)."""
        enc, keys, mask, state = self.encode(x, lengths)
        rows = []
        for s in range(inputs.shape[1]):
            logp, state = self.step((enc, keys, mask), state, inputs[:, s])
            rows.append(logp)
        return torch.stack(rows, dim=1)


AcousticModel = nn.Module


def build_model(mode: str, vocab: Vocabulary, feature_dim: int, seed: int = 0, **hparams) -> nn.Module:
    if mode in (FRAME_SYNCHRONOUS, "ctc"):
        model = FrameModel(vocab, feature_dim, **hparams)
    elif mode in (AUTOREGRESSIVE, "ar"):
        model = ARModel(vocab, feature_dim, **hparams)
    else:
        raise ValueError(f"unknown model mode {mode!r}")
    init_parameters(model, seed)
    return model


def init_parameters(model: nn.Module, seed: int) -> None:
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from a private generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d)):
                fan_in = module.weight[0].numel()
                _uniform(module.weight, fan_in, gen)
                if module.bias is not None:
                    _uniform(module.bias, fan_in, gen)
            elif isinstance(module, (nn.GRU, nn.GRUCell)):
                for p in module.parameters():
                    _uniform(p, module.hidden_size, gen)
            elif isinstance(module, nn.Embedding):
                p = module.weight
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1)


def _uniform(p, fan_in, gen):
    bound = 1.0 / math.sqrt(fan_in)
    p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)


def parameter_groups(model: nn.Module) -> Dict[str, Dict[str, nn.Parameter]]:
    groups: Dict[str, Dict[str, nn.Parameter]] = {}
    for name, p in model.named_parameters():
        group, _, rest = name.partition(".")
        groups.setdefault(group, {})[rest] = p
    return groups


def group_parameters(model: nn.Module, groups) -> List[Tuple[str, str, nn.Parameter]]:
    available = parameter_groups(model)
    unknown = set(groups) - set(available)
    if unknown:
        raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
    return [(g, n, p) for g in sorted(groups) for n, p in available[g].items()]


def _features(model: nn.Module, utterance: Utterance) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(np.asarray(utterance.features), dtype=dtype)
    if feats.shape[1] != model.hparams["feature_dim"]:
        raise ValueError(f"feature dimension mismatch: utterance {feats.shape[1]}, "
                         f"model {model.hparams['feature_dim']}")
    return feats.unsqueeze(0)


def _check_finite(t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError("numerical overflow in forward pass")
    return t


def forward_frames(model: nn.Module, utterance: Utterance) -> LogitMatrix:
    """Row-normalized frame log-probabilities; keeps the autograd graph."""
    if model.mode != FRAME_SYNCHRONOUS:
        raise ValueError("forward_frames requires a frame-synchronous model")
    logp, _ = model(_features(model, utterance))
    return LogitMatrix(_check_finite(logp[0]), normalized=True)


def encode_utterance(model: "ARModel", utterance: Utterance):
    enc, keys, mask, state = model.encode(_features(model, utterance))
    _check_finite(enc)
    return (enc, keys, mask), state


def _check_prefix(model: nn.Module, prefix: Sequence[int]) -> None:
    if model.mode != AUTOREGRESSIVE:
        raise ValueError("score_step requires an autoregressive model")
    if any(t == model.vocab.blank_index for t in prefix):
        raise ValueError("blank not in AR output space")


def teacher_forced_rows(model: "ARModel", utterance: Utterance, sequence: Sequence[int],
                        include_final: bool = False) -> torch.Tensor:
    """Rows log p(y_i = . | y_<i, x) for i = 1..|y| (+1 for the end-of-sequence step)."""
    _check_prefix(model, sequence)
    memory, state = encode_utterance(model, utterance)
    inputs = [model.decoder.bos] + list(sequence)
    steps = len(sequence) + (1 if include_final else 0)
    rows = []
    for s in range(steps):
        logp, state = model.step(memory, state, torch.tensor([inputs[s]]))
        rows.append(logp[0])
    if not rows:
        return memory[0].new_zeros((0, model.vocab.size))
    return _check_finite(torch.stack(rows))


def score_step(model: nn.Module, utterance: Utterance, prefix: Sequence[int]) -> torch.Tensor:
    """log p_AM(next | prefix, x) as a length-C row."""
    _check_prefix(model, prefix)
    return teacher_forced_rows(model, utterance, prefix, include_final=True)[-1]


def teacher_forced_logits(model: nn.Module, utterance: Utterance, sequence: Sequence[int]) -> LogitMatrix:
    return LogitMatrix(teacher_forced_rows(model, utterance, sequence), normalized=True)


@dataclass
class Gradients:
    tensors: Dict[Tuple[str, str], torch.Tensor]
    disconnected: bool = False

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])


def backward(model: nn.Module, loss: torch.Tensor, groups) -> Gradients:
    """d loss / d params for the named groups only. A loss that does not
    reach the groups yields zeros with ``disconnected`` set."""
    params = group_parameters(model, groups)
    if not loss.requires_grad:
        grads = [None] * len(params)
    else:
        grads = torch.autograd.grad(loss, [p for _, _, p in params], allow_unused=True)
    disconnected = all(g is None for g in grads)
    if disconnected:
        warnings.warn("loss is not connected to the requested parameter groups", RuntimeWarning,
                      stacklevel=2)
    tensors = {(g, n): (torch.zeros_like(p) if grad is None else grad)
               for (g, n, p), grad in zip(params, grads)}
    return Gradients(tensors, disconnected)


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    arrays: Dict[Tuple[str, str], torch.Tensor]


def snapshot(model: nn.Module) -> ModelSnapshot:
    return ModelSnapshot({(g, n): p.detach().clone()
                          for g, named in parameter_groups(model).items() for n, p in named.items()})


def restore(model: nn.Module, snap: ModelSnapshot) -> nn.Module:
    current = {(g, n): p for g, named in parameter_groups(model).items() for n, p in named.items()}
    if current.keys() != snap.arrays.keys() or any(
            current[k].shape != snap.arrays[k].shape for k in current):
        raise ValueError("snapshot shape mismatch")
    with torch.no_grad():
        for key, p in current.items():
            p.copy_(snap.arrays[key])
    return model


def clone_model(model: nn.Module) -> nn.Module:
    twin = build_model(model.mode, model.vocab, **model.hparams)
    twin = twin.to(next(model.parameters()).dtype)
    restore(twin, snapshot(model))
    return twin


# -- checkpoint file ---------------------------------------------------------

def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def _read_u32(buf) -> int:
    return struct.unpack("<I", _read_exact(buf, 4))[0]


def _read_str(buf) -> str:
    return _read_exact(buf, _read_u32(buf)).decode("utf-8")


def checkpoint_bytes(model: nn.Module) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    meta = {"mode": model.mode, "tokens": list(model.vocab.tokens),
            "blank_index": model.vocab.blank_index, "hparams": model.hparams}
    _write_str(buf, json.dumps(meta, sort_keys=True))
    groups = parameter_groups(model)
    records = [(g, n, p) for g in groups for n, p in groups[g].items()]
    buf.write(struct.pack("<I", len(records)))
    for group, name, p in records:
        _write_str(buf, group)
        _write_str(buf, name)
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(model: nn.Module, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> nn.Module:
    return model_from_bytes(Path(path).read_bytes(), source=str(path))


def model_from_bytes(raw: bytes, source: str = "<bytes>") -> nn.Module:
    path = source
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    meta = json.loads(_read_str(buf))
    vocab = Vocabulary(tuple(meta["tokens"]), meta["blank_index"])
    model = build_model(meta["mode"], vocab, **meta["hparams"])
    current = parameter_groups(model)
    loaded = set()
    with torch.no_grad():
        for _ in range(_read_u32(buf)):
            group, name = _read_str(buf), _read_str(buf)
            rank = _read_u32(buf)
            dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4").reshape(dims)
            try:
                target = current[group][name]
            except KeyError:
                raise ValueError(f"{path}: unexpected array {group}.{name}") from None
            if tuple(target.shape) != tuple(dims):
                raise ValueError("snapshot shape mismatch")
            target.copy_(torch.from_numpy(arr.astype(np.float32)))
            loaded.add((group, name))
    expected = {(g, n) for g in current for n in current[g]}
    if loaded != expected:
        raise ValueError(f"{path}: missing arrays {sorted(expected - loaded)}")
    return model


# -- source training ---------------------------------------------------------

@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    clip_norm: float = 5.0
    seed: int = 0
    # SpecAugment-style masking: how many spans per utterance and their max width
    time_masks: int = 0
    time_mask_width: int = 0
    feature_masks: int = 0
    feature_mask_width: int = 0

    @property
    def augments(self) -> bool:
        return (self.time_masks and self.time_mask_width) or (self.feature_masks and self.feature_mask_width)


@dataclass
class TrainingReport:
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0
    diverged: bool = False
    heldout_wer: Optional[float] = None


def _pad_batch(utterances: Sequence[Utterance], dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([u.frames for u in utterances], dtype=torch.long)
    dim = utterances[0].features.shape[1]
    x = torch.zeros((len(utterances), int(lengths.max()), dim), dtype=dtype)
    for i, u in enumerate(utterances):
        x[i, :u.frames] = torch.as_tensor(np.asarray(u.features), dtype=dtype)
    return x, lengths


def mask_batch(x: torch.Tensor, lengths: torch.Tensor, config: TrainingConfig,
               rng: np.random.Generator) -> torch.Tensor:
    """Zero random time spans and feature bands of each utterance (in place)."""
    dim = x.shape[2]
    for i, n in enumerate(lengths.tolist()):
        for _ in range(config.time_masks):
            w = int(rng.integers(0, config.time_mask_width + 1))
            if 0 < w < n:
                t0 = int(rng.integers(0, n - w + 1))
                x[i, t0:t0 + w] = 0.0
        for _ in range(config.feature_masks):
            w = int(rng.integers(0, config.feature_mask_width + 1))
            if 0 < w < dim:
                f0 = int(rng.integers(0, dim - w + 1))
                x[i, :n, f0:f0 + w] = 0.0
    return x


def batch_loss(model: nn.Module, utterances: Sequence[Utterance], augment=None) -> torch.Tensor:
    """CTC loss (frame model) or teacher-forced cross-entropy incl. end-of-sequence (AR).

    ``augment(x, lengths)`` may rewrite the padded feature batch first.
    """
    dtype = next(model.parameters()).dtype
    x, lengths = _pad_batch(utterances, dtype)
    if augment is not None:
        x = augment(x, lengths)
    targets = [list(model.vocab.encode(u.reference)) for u in utterances]
    if model.mode == FRAME_SYNCHRONOUS:
        logp, out_lengths = model(x, lengths)
        flat = torch.tensor([t for seq in targets for t in seq], dtype=torch.long)
        target_lengths = torch.tensor([len(seq) for seq in targets], dtype=torch.long)
        return F.ctc_loss(logp.transpose(0, 1), flat, out_lengths, target_lengths,
                          blank=model.vocab.blank_index, reduction="mean", zero_infinity=True)
    eos, bos = model.vocab.blank_index, model.decoder.bos
    width = max(len(t) for t in targets) + 1
    inputs = torch.full((len(targets), width), bos, dtype=torch.long)
    gold = torch.full((len(targets), width), -100, dtype=torch.long)
    for i, seq in enumerate(targets):
        inputs[i, 1:len(seq) + 1] = torch.tensor(seq, dtype=torch.long)
        gold[i, :len(seq) + 1] = torch.tensor(seq + [eos], dtype=torch.long)
    logp = model(x, lengths, inputs)
    return F.nll_loss(logp.reshape(-1, logp.shape[-1]), gold.reshape(-1), ignore_index=-100)


def train_source(model: nn.Module, corpus: Sequence[Utterance], config: Optional[TrainingConfig] = None,
                 heldout: Optional[Sequence[Utterance]] = None) -> Tuple[nn.Module, TrainingReport]:
    """Supervised source-domain training with Adam and gradient clipping.

    On a non-finite loss the parameters from the last finite step are put back
    and training stops with ``report.diverged`` set.
    """
    config = config or TrainingConfig()
    corpus = [u for u in corpus if u.reference]
    if not corpus:
        raise ValueError("training corpus has no labeled utterances")
    report = TrainingReport()
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    augment = (lambda x, n: mask_batch(x, n, config, rng)) if config.augments else None
    last_good = snapshot(model)
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [corpus[i] for i in order[start:start + config.batch_size]]
            loss = batch_loss(model, batch, augment)
            if not torch.isfinite(loss):
                restore(model, last_good)
                report.diverged = True
                log.warning("non-finite loss at epoch %d step %d; restored last finite parameters",
                            epoch, report.steps)
                return model, report
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            optimizer.step()
            last_good = snapshot(model)
            report.steps += 1
            total += loss.item()
            batches += 1
        report.epoch_losses.append(total / batches)
        log.info("epoch %d loss %.4f", epoch + 1, report.epoch_losses[-1])
    if heldout:
        from .evaluation import evaluate
        report.heldout_wer = evaluate(model, heldout, decode="greedy").wer
    return model, report

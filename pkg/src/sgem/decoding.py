"""Greedy and beam decoding, CTC forced alignment, and logit acquisition for adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import acoustic
from .core import (AUTOREGRESSIVE, FRAME_SYNCHRONOUS, AdaptationConfig, Hypothesis, LogitMatrix,
                   TokenSequence, Utterance, Vocabulary)
from .lm import NGramLM
from .objectives import blank_argmax_mask

NEG_INF = -math.inf
MAX_DECODE_RATIO = 2


def _logaddexp(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _as_array(logits) -> np.ndarray:
    if isinstance(logits, LogitMatrix):
        return logits.numpy()
    if torch.is_tensor(logits):
        return logits.detach().cpu().double().numpy()
    return np.asarray(logits, dtype=np.float64)


def ctc_collapse(frames: Sequence[int], vocab: Vocabulary) -> TokenSequence:
    out, prev = [], None
    for tok in frames:
        tok = int(tok)
        if tok != prev and tok != vocab.blank_index:
            out.append(tok)
        prev = tok
    return tuple(out)


def greedy_decode(logits, vocab: Vocabulary) -> TokenSequence:
    """Row argmax (lowest index on ties) followed by CTC collapse."""
    return ctc_collapse(np.argmax(_as_array(logits), axis=1), vocab)


def ctc_log_likelihood(logits, target: Sequence[int], vocab: Vocabulary) -> float:
    """log sum over all alignments of ``target`` (CTC forward recursion)."""
    lp = _as_array(logits)
    L = lp.shape[0]
    ext = _extend(target, vocab.blank_index)
    S = len(ext)
    alpha = np.full(S, -np.inf)
    alpha[0] = lp[0, ext[0]]
    if S > 1:
        alpha[1] = lp[0, ext[1]]
    skip = _skip_allowed(ext, vocab.blank_index)
    for t in range(1, L):
        prev1 = np.concatenate(([-np.inf], alpha[:-1]))
        prev2 = np.where(skip, np.concatenate(([-np.inf, -np.inf], alpha[:-2]))[:S], -np.inf)
        alpha = np.logaddexp(np.logaddexp(alpha, prev1), prev2) + lp[t, ext]
    tail = alpha[-1] if S == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(tail)


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = [blank]
    for tok in target:
        ext += [int(tok), blank]
    return np.asarray(ext, dtype=np.int64)


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    for s in range(2, len(ext)):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return skip


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def forced_align(logits, target: Sequence[int], vocab: Vocabulary) -> TokenSequence:
    """Most probable frame labeling whose collapse is ``target`` (Viterbi on the CTC lattice).

    Ties prefer staying in the current lattice state, then the shortest skip.
    """
    lp = _as_array(logits)
    L = lp.shape[0]
    blank = vocab.blank_index
    if min_frames(target) > L:
        raise ValueError("target infeasible for L frames")
    if not target:
        return (blank,) * L
    ext = _extend(target, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    score = np.full(S, -np.inf)
    score[0] = lp[0, ext[0]]
    score[1] = lp[0, ext[1]]
    back = np.zeros((L, S), dtype=np.int64)
    for t in range(1, L):
        stay = score
        step = np.concatenate(([-np.inf], score[:-1]))
        jump = np.where(skip, np.concatenate(([-np.inf, -np.inf], score[:-2])), -np.inf)
        cand = np.stack([stay, step, jump])
        choice = np.argmax(cand, axis=0)
        back[t] = np.arange(S) - choice
        score = cand[choice, np.arange(S)] + lp[t, ext]
    state = S - 1 if score[S - 1] >= score[S - 2] else S - 2
    path = [state]
    for t in range(L - 1, 0, -1):
        state = back[t, state]
        path.append(state)
    return tuple(int(ext[s]) for s in reversed(path))


def path_log_prob(logits, alignment: Sequence[int]) -> float:
    lp = _as_array(logits)
    return float(lp[np.arange(len(alignment)), list(alignment)].sum())


# -- CTC prefix beam search ----------------------------------------------------

class _LMCache:
    def __init__(self, lm: Optional[NGramLM]):
        self.lm = lm
        self.rows: Dict[TokenSequence, np.ndarray] = {}

    def row(self, prefix: TokenSequence) -> Optional[np.ndarray]:
        if self.lm is None:
            return None
        row = self.rows.get(prefix)
        if row is None:
            row = self.rows[prefix] = self.lm.score_next(prefix, bos=True)
        return row


def _rank_key(fused: float, prefix: TokenSequence):
    return (-fused, prefix)


def ctc_prefix_beam_search(logits, vocab: Vocabulary, beam_width: int, lm: Optional[NGramLM] = None,
                           lambda_lm: float = 0.0, trace: Optional[list] = None) -> Hypothesis:
    """CTC prefix beam search with shallow LM fusion.

    Each prefix carries log-mass of alignments ending in blank / non-blank;
    extending by token c adds lambda_lm * log p_LM(c | prefix). The final
    ranking also adds the LM end-of-sentence score. Width 1 is plain greedy
    path decoding.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    lp = _as_array(logits)
    cache = _LMCache(lm)
    blank = vocab.blank_index

    if beam_width == 1:
        seq = greedy_decode(lp, vocab)
        lm_score = lm.sequence_logprob(seq) if lm is not None else 0.0
        am = ctc_log_likelihood(lp, seq, vocab)
        return Hypothesis(seq, am, lm_score, lambda_lm)

    tokens = [c for c in range(vocab.size) if c != blank]
    beams: Dict[TokenSequence, List[float]] = {(): [0.0, NEG_INF]}
    lm_scores: Dict[TokenSequence, float] = {(): 0.0}

    for t in range(lp.shape[0]):
        row = lp[t]
        nxt: Dict[TokenSequence, List[float]] = {}
        for prefix, (pb, pnb) in beams.items():
            total = _logaddexp(pb, pnb)
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[0] = _logaddexp(entry[0], total + row[blank])
            last = prefix[-1] if prefix else None
            if last is not None:
                entry[1] = _logaddexp(entry[1], pnb + row[last])
            lm_row = cache.row(prefix)
            for c in tokens:
                new = prefix + (c,)
                ext = nxt.setdefault(new, [NEG_INF, NEG_INF])
                source = pb if c == last else total
                ext[1] = _logaddexp(ext[1], source + row[c])
                if new not in lm_scores:
                    lm_scores[new] = lm_scores[prefix] + (0.0 if lm_row is None else float(lm_row[c]))
        ranked = sorted(nxt.items(), key=lambda kv: _rank_key(
            _logaddexp(*kv[1]) + lambda_lm * lm_scores[kv[0]], kv[0]))
        beams = dict(ranked[:beam_width])
        if trace is not None:
            trace.append((t, [(p, _logaddexp(*s), lm_scores[p], _logaddexp(*s) + lambda_lm * lm_scores[p])
                              for p, s in beams.items()]))

    finals = []
    for prefix, scores in beams.items():
        am = _logaddexp(*scores)
        lm_total = lm_scores[prefix]
        if lm is not None:
            lm_total += float(cache.row(prefix)[lm.eos])
        finals.append((am + lambda_lm * lm_total, prefix, am, lm_total))
    finals.sort(key=lambda f: _rank_key(f[0], f[1]))
    _, prefix, am, lm_total = finals[0]
    return Hypothesis(prefix, am, lm_total, lambda_lm)


def format_trace(trace, vocab: Vocabulary) -> str:
    lines = []
    for t, entries in trace:
        parts = [f"{vocab.decode(p) or '<empty>'}:am={am:.4f},lm={lm:.4f},fused={fused:.4f}"
                 for p, am, lm, fused in entries]
        lines.append(f"{t}\t" + "\t".join(parts))
    return "\n".join(lines) + "\n"


# -- autoregressive decoding ---------------------------------------------------

def _max_decode_len(memory) -> int:
    return MAX_DECODE_RATIO * memory[0].shape[1]


@torch.no_grad()
def ar_greedy_decode(model, utterance: Utterance) -> TokenSequence:
    memory, state = acoustic.encode_utterance(model, utterance)
    eos, prev, out = model.vocab.blank_index, model.decoder.bos, []
    for _ in range(_max_decode_len(memory)):
        logp, state = model.step(memory, state, torch.tensor([prev]))
        tok = int(torch.argmax(logp[0]))
        if tok == eos:
            break
        out.append(tok)
        prev = tok
    return tuple(out)


@torch.no_grad()
def ar_beam_search(model, utterance: Utterance, beam_width: int, lm: Optional[NGramLM] = None,
                   lambda_lm: float = 0.0) -> Hypothesis:
    """Step-synchronous beam search over decoder steps with shallow fusion."""
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    memory, state = acoustic.encode_utterance(model, utterance)
    eos = model.vocab.blank_index
    cache = _LMCache(lm)
    # (prefix, am, lm, state)
    active = [((), 0.0, 0.0, state)]
    finished = []
    for _ in range(_max_decode_len(memory)):
        if not active:
            break
        h = torch.cat([s[0] for _, _, _, s in active])
        ctx = torch.cat([s[1] for _, _, _, s in active])
        prev = torch.tensor([p[-1] if p else model.decoder.bos for p, _, _, _ in active])
        n = len(active)
        mem = tuple(m.expand(n, *m.shape[1:]) for m in memory)
        logp, (h, ctx) = model.step(mem, (h, ctx), prev)
        logp = logp.double().numpy()
        candidates = []
        for i, (prefix, am, lm_s, _) in enumerate(active):
            lm_row = cache.row(prefix)
            for c in range(model.vocab.size):
                new_lm = lm_s + (0.0 if lm_row is None else float(lm_row[c]))
                new_am = am + float(logp[i, c])
                candidates.append((new_am + lambda_lm * new_lm, prefix, c, new_am, new_lm, i))
        candidates.sort(key=lambda x: (-x[0], x[1] + (x[2],)))
        active = []
        for fused, prefix, c, new_am, new_lm, i in candidates[:beam_width]:
            if c == eos:
                finished.append((fused, prefix, new_am, new_lm))
            else:
                active.append((prefix + (c,), new_am, new_lm, (h[i:i + 1], ctx[i:i + 1])))
        if finished and active:
            best_done = max(f[0] for f in finished)
            if all(am + lambda_lm * lm_s <= best_done for _, am, lm_s, _ in active):
                break
    for prefix, am, lm_s, _ in active:
        finished.append((am + lambda_lm * lm_s, prefix, am, lm_s))
    finished.sort(key=lambda f: (-f[0], f[1]))
    _, prefix, am, lm_s = finished[0]
    return Hypothesis(prefix, am, lm_s, lambda_lm)


# -- model-level entry points --------------------------------------------------

@torch.no_grad()
def decode_greedy(model, utterance: Utterance) -> TokenSequence:
    if model.mode == FRAME_SYNCHRONOUS:
        return greedy_decode(acoustic.forward_frames(model, utterance), model.vocab)
    return ar_greedy_decode(model, utterance)


@torch.no_grad()
def beam_search(model, lm: Optional[NGramLM], utterance: Utterance, beam_width: int,
                lambda_lm: float = 0.0, trace: Optional[list] = None) -> Hypothesis:
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    if model.mode == FRAME_SYNCHRONOUS:
        logits = acoustic.forward_frames(model, utterance)
        return ctc_prefix_beam_search(logits, model.vocab, beam_width, lm, lambda_lm, trace)
    return ar_beam_search(model, utterance, beam_width, lm, lambda_lm)


def transcribe(model, utterance: Utterance, decode: str = "greedy", lm: Optional[NGramLM] = None,
               beam_width: int = 5, lambda_lm: float = 0.0) -> str:
    if decode == "greedy":
        seq = decode_greedy(model, utterance)
    elif decode == "beam":
        seq = beam_search(model, lm, utterance, beam_width, lambda_lm).sequence
    else:
        raise ValueError(f"unknown decode mode {decode!r}")
    return model.vocab.decode(seq)


@dataclass
class Acquisition:
    logits: LogitMatrix
    mask: torch.Tensor
    hypothesis: TokenSequence
    fallback: bool = False


def acquire_logits(model, lm: Optional[NGramLM], utterance: Utterance,
                   config: AdaptationConfig) -> Acquisition:
    """Logits the adaptation losses are computed on, with the rows they may use.

    Frame models: the frame log-probabilities, restricted (when beam search is
    on) to frames the forced alignment of the beam hypothesis labels
    non-blank. AR models: the hypothesis teacher-forced through the decoder,
    one row per hypothesis token.
    """
    vocab = model.vocab
    if model.mode == FRAME_SYNCHRONOUS:
        logits = acoustic.forward_frames(model, utterance)
        rows = logits.shape[0]
        if not config.use_beam_search:
            return Acquisition(logits, torch.ones(rows, dtype=torch.bool), greedy_decode(logits, vocab))
        hyp = ctc_prefix_beam_search(logits, vocab, config.beam_width, lm, config.lambda_lm).sequence
        if not hyp:
            return Acquisition(logits, blank_argmax_mask(logits, vocab), hyp, fallback=True)
        alignment = forced_align(logits, hyp, vocab)
        mask = torch.tensor([tok != vocab.blank_index for tok in alignment], dtype=torch.bool)
        return Acquisition(logits, mask, hyp)

    if model.mode != AUTOREGRESSIVE:
        raise ValueError(f"unknown model mode {model.mode!r}")
    if config.use_beam_search:
        hyp = beam_search(model, lm, utterance, config.beam_width, config.lambda_lm).sequence
    else:
        hyp = ar_greedy_decode(model, utterance)
    if not hyp:
        rows = acoustic.teacher_forced_rows(model, utterance, hyp, include_final=True)
        logits = LogitMatrix(rows, normalized=True)
        return Acquisition(logits, blank_argmax_mask(logits, vocab), hyp, fallback=True)
    logits = acoustic.teacher_forced_logits(model, utterance, hyp)
    return Acquisition(logits, torch.ones(len(hyp), dtype=torch.bool), hyp)

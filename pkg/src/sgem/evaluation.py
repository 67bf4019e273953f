"""Corpus-level scoring of a frozen model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from .core import Utterance
from .corpus import cer, corpus_error_counts
from .decoding import transcribe
from .lm import NGramLM


@dataclass
class EvalReport:
    wer: float
    cer: float
    errors: int
    words: int
    hypotheses: List[str] = field(default_factory=list)


def score_pairs(refs: Sequence[str], hyps: Sequence[str]) -> EvalReport:
    errors, words = corpus_error_counts(list(zip(refs, hyps)))
    if words == 0:
        raise ValueError("no reference words to score against")
    char_err = sum(cer(r, h) * len(r) for r, h in zip(refs, hyps))
    chars = sum(len(r) for r in refs)
    return EvalReport(errors / words, char_err / chars, errors, words, list(hyps))


def evaluate(model, utterances: Sequence[Utterance], decode: str = "greedy", lm: Optional[NGramLM] = None,
             beam_width: int = 5, lambda_lm: float = 0.0) -> EvalReport:
    utterances = list(utterances)
    if any(u.reference is None for u in utterances):
        raise ValueError("missing references: evaluation needs a reference for every utterance")
    hyps = [transcribe(model, u, decode, lm, beam_width, lambda_lm) for u in utterances]
    return score_pairs([u.reference for u in utterances], hyps)

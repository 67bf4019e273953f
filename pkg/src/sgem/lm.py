"""Token-level n-gram language model with add-k smoothing and unigram backoff.

Rows returned by the model are indexed like the acoustic vocabulary, with one
twist: the blank slot holds the end-of-sentence probability. That keeps every
row a proper distribution over ``vocab.size`` outcomes.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .core import Vocabulary

BOS = -1
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
MAGIC = "SGEML1"

Context = Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class NGramLM:
    order: int
    vocab: Vocabulary
    rows: Dict[Context, np.ndarray]
    k: float = 0.1

    @property
    def eos(self) -> int:
        return self.vocab.blank_index

    @property
    def unigram(self) -> np.ndarray:
        return self.rows[()]

    def _key(self, context: Sequence[int], bos: bool) -> Context:
        history = ([BOS] if bos else []) + list(context)
        if self.order == 1:
            return ()
        return tuple(history[-(self.order - 1):])

    def score_next(self, context: Sequence[int] = (), bos: bool = False) -> np.ndarray:
        """Log-distribution over the next token given ``context``.

        ``bos=True`` anchors the context at a sentence start. Contexts never
        seen in training fall back to the unigram row.
        """
        row = self.rows.get(self._key(context, bos))
        return self.unigram if row is None else row

    def sequence_logprob(self, ids: Sequence[int], eos: bool = True) -> float:
        """Sentence-anchored log p(ids) (+ end-of-sentence when ``eos``)."""
        total, history = 0.0, []
        for tok in ids:
            total += float(self.score_next(history, bos=True)[tok])
            history.append(tok)
        if eos:
            total += float(self.score_next(history, bos=True)[self.eos])
        return total

    def save(self, path) -> None:
        names = _lm_token_names(self.vocab)
        for name in names:
            if any(ch.isspace() for ch in name):
                raise ValueError(f"token {name!r} contains whitespace; cannot write LM file")
        lines = []
        for context, row in self.rows.items():
            ctx = " ".join(BOS_TOKEN if t == BOS else names[t] for t in context)
            for tok, logp in enumerate(row):
                lines.append((ctx, names[tok], repr(float(logp) / math.log(10))))
        lines.sort(key=lambda r: (r[0], r[1]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{MAGIC} n={self.order}\n")
            for ctx, tok, val in lines:
                fh.write(f"{ctx}\t{tok}\t{val}\n")


def _lm_token_names(vocab: Vocabulary) -> list:
    names = list(vocab.tokens)
    names[vocab.blank_index] = EOS_TOKEN
    return names


def fit(transcripts: Iterable[str], vocab: Vocabulary, n: int = 4, k: float = 0.1) -> NGramLM:
    """Count every context of length < n (sentence-anchored near the start)
    and turn counts into add-k smoothed conditionals over all outcomes."""
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    if not k > 0:
        raise ValueError("smoothing k must be positive")
    transcripts = list(transcripts)
    if not transcripts:
        raise ValueError("no transcripts to fit")

    C = vocab.size
    counts: Dict[Context, np.ndarray] = defaultdict(lambda: np.zeros(C))
    for text in transcripts:
        ids = list(vocab.encode(text))
        history = [BOS] + ids
        targets = ids + [vocab.blank_index]
        for i, target in enumerate(targets):
            seen = history[:i + 1]
            for m in range(min(n - 1, len(seen)) + 1):
                counts[tuple(seen[len(seen) - m:])][target] += 1

    rows = {}
    for context, c in counts.items():
        rows[context] = np.log((c + k) / (c.sum() + k * C))
    return NGramLM(order=n, vocab=vocab, rows=rows, k=k)


def load(path, vocab: Vocabulary) -> NGramLM:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(MAGIC):
        raise ValueError(f"{path}: not an LM file (missing {MAGIC} header)")
    try:
        order = int(text[0].split("n=", 1)[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed header {text[0]!r}") from None

    names = _lm_token_names(vocab)
    index = {name: i for i, name in enumerate(names)}
    index[BOS_TOKEN] = BOS
    C = vocab.size
    rows: Dict[Context, np.ndarray] = {}
    seen_tokens = set()
    for lineno, line in enumerate(text[1:], 2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        ctx, tok, val = parts
        seen_tokens.add(tok)
        try:
            context = tuple(index[t] for t in ctx.split())
            tok_id = index[tok]
        except KeyError as exc:
            raise ValueError(f"vocabulary size mismatch: LM token {exc.args[0]!r} not in vocabulary") from None
        rows.setdefault(context, np.full(C, -np.inf))[tok_id] = float(val) * math.log(10)
    if seen_tokens != set(names):
        raise ValueError(f"vocabulary size mismatch: LM has {len(seen_tokens)} outcomes, vocabulary {C}")
    if () not in rows:
        raise ValueError(f"{path}: missing unigram entries")
    for context, row in rows.items():
        if not np.all(np.isfinite(row)):
            raise ValueError(f"{path}: incomplete row for context {context}")
    return NGramLM(order=order, vocab=vocab, rows=rows)

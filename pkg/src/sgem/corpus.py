"""Synthetic corpora, feature-space noise injection, corpus files, and error-rate metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import WORD_DELIMITER, Utterance, Vocabulary, to_words

FEATURE_MAGIC = b"SGEMF1"


# -- metrics -------------------------------------------------------------------

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """Word-level Levenshtein distance over the reference word count. Can exceed 1."""
    ref = reference.split()
    if not ref:
        raise ValueError("empty reference")
    return edit_distance(ref, hypothesis.split()) / len(ref)


def cer(reference: Sequence, hypothesis: Sequence) -> float:
    if not reference:
        raise ValueError("empty reference")
    return edit_distance(list(reference), list(hypothesis)) / len(reference)


def transcript_wer(reference: str, hypothesis: str) -> float:
    """WER between token transcripts, splitting words at the delimiter token."""
    return wer(to_words(reference), to_words(hypothesis))


def corpus_error_counts(pairs: Sequence[Tuple[str, str]]) -> Tuple[int, int]:
    errors = words = 0
    for ref, hyp in pairs:
        r, h = to_words(ref).split(), to_words(hyp).split()
        errors += edit_distance(r, h)
        words += len(r)
    return errors, words


def corpus_wer(pairs: Sequence[Tuple[str, str]]) -> float:
    """Total word errors over total reference words."""
    errors, words = corpus_error_counts(pairs)
    if words == 0:
        raise ValueError("empty references")
    return errors / words


# -- feature and manifest files ------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if arr.ndim != 2:
        raise ValueError("features must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    rows, cols = struct.unpack_from("<II", raw, len(FEATURE_MAGIC))
    offset = len(FEATURE_MAGIC) + 8
    if len(raw) != offset + 4 * rows * cols:
        raise ValueError(f"{path}: payload size does not match {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(rows, cols).astype(np.float32)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    features: str
    reference: Optional[str]
    frames: int


@dataclass
class CorpusManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def feature_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.features)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> Utterance:
        return Utterance(entry.id, read_features(self.feature_path(entry)), entry.reference)

    def utterances(self) -> List[Utterance]:
        return [self.load(e) for e in self.entries]

    def subset(self, entries) -> "CorpusManifest":
        return CorpusManifest(list(entries), self.root)


def write_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({"id": e.id, "features": e.features, "reference": e.reference,
                                 "frames": e.frames}, sort_keys=True) + "\n")


def read_manifest(path, check_files: bool = True) -> CorpusManifest:
    path = Path(path)
    entries, ids = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        try:
            entry = ManifestEntry(str(obj["id"]), obj["features"], obj.get("reference"), int(obj["frames"]))
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
        if entry.id in ids:
            raise ValueError(f"{path}:{lineno}: duplicate id {entry.id!r}")
        ids.add(entry.id)
        entries.append(entry)
    manifest = CorpusManifest(entries, path.parent)
    if check_files:
        for e in entries:
            if not manifest.feature_path(e).is_file():
                raise FileNotFoundError(f"{path}: feature file for {e.id!r} not found")
    return manifest


def save_corpus(utterances: Sequence[Utterance], out_dir) -> CorpusManifest:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for u in utterances:
        rel = f"features/{u.id}.feat"
        write_features(out / rel, u.features)
        entries.append(ManifestEntry(u.id, rel, u.reference, u.frames))
    manifest = CorpusManifest(entries, out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


# -- synthetic generation --------------------------------------------------------

@dataclass(frozen=True)
class EmissionParams:
    """Acoustics of the synthetic language: one Gaussian per non-blank token.

    Class means are orthogonal with equal pairwise distance
    ``separation * sigma_clean``; ``means_seed`` fixes them independently of
    the utterance seed so that every split shares one acoustic space.
    """

    feature_dim: int = 16
    separation: float = 4.0
    sigma_clean: float = 10.0
    frames_per_token: Tuple[int, int] = (4, 8)
    means_seed: int = 1234

    def class_means(self, vocab: Vocabulary) -> np.ndarray:
        tokens = [i for i in range(vocab.size) if i != vocab.blank_index]
        if len(tokens) > self.feature_dim:
            raise ValueError("feature_dim must be at least the number of non-blank tokens")
        rng = np.random.default_rng(self.means_seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.feature_dim, len(tokens))))
        radius = self.separation * self.sigma_clean / np.sqrt(2.0)
        means = np.zeros((vocab.size, self.feature_dim))
        for k, tok in enumerate(tokens):
            means[tok] = radius * q[:, k]
        return means


@dataclass(frozen=True)
class TextPrior:
    """First-order Markov source over tokens: no immediate repeats, no empty
    words, delimiter probability ``delimiter_prob`` after a letter."""

    seed: int = 77
    delimiter_prob: float = 0.25
    concentration: float = 0.5

    def transitions(self, vocab: Vocabulary) -> np.ndarray:
        C = vocab.size
        delim = vocab.tokens.index(WORD_DELIMITER) if WORD_DELIMITER in vocab.tokens else None
        letters = [i for i in range(C) if i not in (vocab.blank_index, delim)]
        rng = np.random.default_rng(self.seed)
        P = np.zeros((C + 1, C))  # row C is the start state
        for src in letters + ([delim] if delim is not None else []) + [C]:
            allowed = [t for t in letters if t != src]
            w = rng.dirichlet(np.full(len(allowed), self.concentration))
            P[src, allowed] = w
            if src in letters and delim is not None:
                P[src] *= 1.0 - self.delimiter_prob
                P[src, delim] = self.delimiter_prob
        return P

    def sample(self, vocab: Vocabulary, length: int, rng: np.random.Generator,
               transitions: Optional[np.ndarray] = None) -> Tuple[int, ...]:
        P = self.transitions(vocab) if transitions is None else transitions
        state, out = vocab.size, []
        for _ in range(length):
            state = int(rng.choice(vocab.size, p=P[state]))
            out.append(state)
        while out and vocab.tokens[out[-1]] == WORD_DELIMITER:
            out.pop()
        return tuple(out)


def emit_features(ids: Sequence[int], means: np.ndarray, params: EmissionParams,
                  rng: np.random.Generator) -> np.ndarray:
    lo, hi = params.frames_per_token
    blocks = []
    for tok in ids:
        d = int(rng.integers(lo, hi + 1))
        blocks.append(means[tok] + params.sigma_clean * rng.standard_normal((d, params.feature_dim)))
    return np.concatenate(blocks).astype(np.float32)


def generate_utterances(vocab: Vocabulary, n_utterances: int, length_range: Tuple[int, int] = (6, 20),
                        emission: Optional[EmissionParams] = None, seed: int = 0,
                        prior: Optional[TextPrior] = None, prefix: str = "utt") -> List[Utterance]:
    lo, hi = length_range
    if not (1 <= lo <= hi <= 100):
        raise ValueError("length_range must lie within [1, 100]")
    emission = emission or EmissionParams()
    prior = prior or TextPrior()
    means = emission.class_means(vocab)
    P = prior.transitions(vocab)
    rng = np.random.default_rng(seed)
    utterances = []
    for i in range(n_utterances):
        ids: Tuple[int, ...] = ()
        while not ids:
            ids = prior.sample(vocab, int(rng.integers(lo, hi + 1)), rng, P)
        feats = emit_features(ids, means, emission, rng)
        utterances.append(Utterance(f"{prefix}{i:05d}", feats, vocab.decode(ids)))
    return utterances


def make_synthetic_corpus(vocab: Vocabulary, n_utterances: int, length_range: Tuple[int, int] = (6, 20),
                          emission: Optional[EmissionParams] = None, seed: int = 0, out_dir=None,
                          prior: Optional[TextPrior] = None, shift: Optional[str] = None,
                          snr_db: float = 10.0) -> CorpusManifest:
    """Generate (and optionally shift) a corpus, then write features + manifest to ``out_dir``."""
    if out_dir is None:
        raise ValueError("out_dir is required")
    utterances = generate_utterances(vocab, n_utterances, length_range, emission, seed, prior)
    if shift:
        utterances = apply_shift(utterances, shift, snr_db, seed, vocab, emission)
    return save_corpus(utterances, out_dir)


# -- noise ---------------------------------------------------------------------------

def mix_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """signal + g * noise with g chosen so that 10 log10(P_signal / P_noise_scaled) = snr_db.

    Powers are mean squares over all entries; the noise is tiled or truncated
    along time to the signal length.
    """
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 1:
        noise = noise[:, None]
    if noise.shape[1:] != signal.shape[1:]:
        raise ValueError("noise and signal feature dimensions differ")
    reps = -(-signal.shape[0] // noise.shape[0])
    noise = np.tile(noise, (reps,) + (1,) * (noise.ndim - 1))[:signal.shape[0]]
    p_signal = np.mean(signal ** 2)
    p_noise = np.mean(noise ** 2)
    if p_noise == 0:
        raise ValueError("noise has zero power")
    if p_signal == 0:
        raise ValueError("signal has zero power")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal + gain * noise


def measured_snr(clean: np.ndarray, mixed: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(mixed, dtype=np.float64) - clean
    return 10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))


NOISE_TEXTURES = ("offset", "drift", "babble", "periodic", "burst", "lowrank", "impulse", "white")
TEXTURE_FRAMES = 64


def noise_texture(kind, feature_dim: int, vocab: Optional[Vocabulary] = None,
                  emission: Optional[EmissionParams] = None) -> np.ndarray:
    """A fixed ``TEXTURE_FRAMES x feature_dim`` noise pattern. ``kind`` is a name or index."""
    name = NOISE_TEXTURES[kind] if isinstance(kind, int) else kind
    if name not in NOISE_TEXTURES:
        raise ValueError(f"unknown noise texture {kind!r}")
    rng = np.random.default_rng(9000 + NOISE_TEXTURES.index(name))
    F, D = TEXTURE_FRAMES, feature_dim
    t = np.arange(F)[:, None]
    if name == "offset":
        return np.tile(rng.standard_normal(D), (F, 1))
    if name == "drift":
        return np.sin(2 * np.pi * t / F) * rng.standard_normal(D) + 0.5 * rng.standard_normal(D)
    if name == "babble":
        vocab = vocab or Vocabulary.default()
        emission = emission or EmissionParams(feature_dim=D)
        means = emission.class_means(vocab)
        letters = [i for i in range(vocab.size) if i != vocab.blank_index]
        picks = [rng.choice(letters, size=3, replace=False) for _ in range(F // 2)]
        frames = [means[p].mean(axis=0) for p in picks for _ in range(2)]
        return np.asarray(frames) + 0.3 * rng.standard_normal((F, D))
    if name == "periodic":
        pattern = rng.standard_normal((5, D))
        return np.tile(pattern, (F // 5 + 1, 1))[:F]
    if name == "burst":
        gate = (rng.random(F // 8) < 0.5).repeat(8)[:, None]
        return gate * rng.standard_normal((F, D)) * 2.0 + 0.1 * rng.standard_normal((F, D))
    if name == "lowrank":
        return rng.standard_normal((F, 2)) @ rng.standard_normal((2, D))
    if name == "impulse":
        out = 0.05 * rng.standard_normal((F, D))
        hits = rng.random((F, D)) < 0.05
        return out + hits * rng.standard_normal((F, D)) * 6.0
    return rng.standard_normal((F, D))


def parse_shift(shift: str) -> Tuple[str, Optional[int]]:
    if shift in ("none", ""):
        return "none", None
    if shift == "gauss":
        return "gauss", None
    if shift.startswith("texture:"):
        k = int(shift.split(":", 1)[1])
        if not 0 <= k < len(NOISE_TEXTURES):
            raise ValueError(f"texture index must be in [0, {len(NOISE_TEXTURES)})")
        return "texture", k
    raise ValueError(f"unknown shift {shift!r}; expected none, gauss or texture:K")


def apply_shift(utterances: Sequence[Utterance], shift: str, snr_db: float, seed: int = 0,
                vocab: Optional[Vocabulary] = None,
                emission: Optional[EmissionParams] = None) -> List[Utterance]:
    """Noise every utterance at ``snr_db``. Texture shifts start the pattern at a
    per-utterance random offset; ``gauss`` draws fresh white noise."""
    kind, k = parse_shift(shift)
    if kind == "none":
        return list(utterances)
    rng = np.random.default_rng([seed, 0x5EED])
    out = []
    for u in utterances:
        dim = u.features.shape[1]
        if kind == "gauss":
            noise = rng.standard_normal(u.features.shape)
        else:
            tex = noise_texture(k, dim, vocab, emission)
            noise = np.roll(tex, -int(rng.integers(tex.shape[0])), axis=0)
        mixed = mix_at_snr(u.features, noise, snr_db).astype(np.float32)
        out.append(Utterance(u.id, mixed, u.reference))
    return out


# -- length buckets --------------------------------------------------------------------

def bucket_by_length(manifest: CorpusManifest, bucket_edges: Sequence[float]) -> List[CorpusManifest]:
    """Partition by ``frames`` into half-open buckets (-inf, e1), [e1, e2), ..., [ek, inf)."""
    edges = list(bucket_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    buckets: List[List[ManifestEntry]] = [[] for _ in range(len(edges) + 1)]
    for e in manifest.entries:
        buckets[int(np.searchsorted(edges, e.frames, side="right"))].append(e)
    return [manifest.subset(b) for b in buckets]


def bucket_labels(bucket_edges: Sequence[float]) -> List[str]:
    bounds = ["-inf"] + [f"{e:g}" for e in bucket_edges] + ["inf"]
    return [f"[{a},{b})" for a, b in zip(bounds, bounds[1:])]

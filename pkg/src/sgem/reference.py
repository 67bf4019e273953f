"""The shipped reference setup: source-trained CTC model, n-gram LM, a clean
held-out corpus and a shifted test corpus, plus the recipe that rebuilds them.

``python -m sgem.reference [out_dir]`` regenerates every asset from seeds.
"""

from __future__ import annotations

import logging
import sys
import time
from pathlib import Path
from typing import Optional

from . import acoustic, corpus
from . import lm as lm_module
from .core import Vocabulary
from .evaluation import evaluate

log = logging.getLogger(__name__)

ASSET_DIR = Path(__file__).with_name("assets")
MODEL_FILE = "reference_ctc.ckpt"
LM_FILE = "reference.lm"
CLEAN_DIR = "clean"
SHIFTED_DIR = "shifted"

EMISSION = corpus.EmissionParams()
LENGTH_RANGE = (6, 20)
MODEL_HPARAMS = dict(channels=128, hidden=64, kernel=5)
TRAINING = acoustic.TrainingConfig(epochs=30, batch_size=32, lr=3e-3, seed=0)
LM_ORDER = 4

TRAIN_UTTERANCES, TRAIN_SEED = 2000, 1
CLEAN_UTTERANCES, CLEAN_SEED = 200, 2
SHIFTED_UTTERANCES, SHIFTED_SEED = 400, 41
SHIFT = "texture:0"
SNR_DB = 10.0
MODEL_SEED = 0


def _dir(root) -> Path:
    return ASSET_DIR if root is None else Path(root)


def load_model(root=None):
    return acoustic.load_checkpoint(_dir(root) / MODEL_FILE)


def load_lm(vocab: Vocabulary, root=None):
    return lm_module.load(_dir(root) / LM_FILE, vocab)


def clean_corpus(root=None) -> corpus.CorpusManifest:
    return corpus.read_manifest(_dir(root) / CLEAN_DIR / "manifest.jsonl")


def shifted_corpus(root=None) -> corpus.CorpusManifest:
    return corpus.read_manifest(_dir(root) / SHIFTED_DIR / "manifest.jsonl")


def training_corpus(vocab: Vocabulary, n: Optional[int] = None):
    return corpus.generate_utterances(vocab, TRAIN_UTTERANCES if n is None else n, LENGTH_RANGE, EMISSION,
                                      seed=TRAIN_SEED, prefix="tr")


def build(out_dir=None, train_utterances: Optional[int] = None, epochs: Optional[int] = None) -> dict:
    """Train the reference model and write model, LM and both corpora to ``out_dir``.

    The smaller-size overrides exist for smoke tests; the shipped assets use
    the module defaults.
    """
    out = _dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.default()
    train = training_corpus(vocab, train_utterances)
    config = TRAINING if epochs is None else acoustic.TrainingConfig(**{**TRAINING.__dict__, "epochs": epochs})

    started = time.perf_counter()
    model = acoustic.build_model("ctc", vocab, EMISSION.feature_dim, seed=MODEL_SEED, **MODEL_HPARAMS)
    model, report = acoustic.train_source(model, train, config)
    if report.diverged:
        raise RuntimeError("reference training diverged")
    acoustic.save_checkpoint(model, out / MODEL_FILE)
    lm_module.fit([u.reference for u in train], vocab, n=LM_ORDER).save(out / LM_FILE)

    clean = corpus.generate_utterances(vocab, CLEAN_UTTERANCES, LENGTH_RANGE, EMISSION, seed=CLEAN_SEED,
                                       prefix="cl")
    corpus.save_corpus(clean, out / CLEAN_DIR)
    test = corpus.generate_utterances(vocab, SHIFTED_UTTERANCES, LENGTH_RANGE, EMISSION, seed=SHIFTED_SEED,
                                      prefix="sh")
    shifted = corpus.apply_shift(test, SHIFT, SNR_DB, seed=SHIFTED_SEED, vocab=vocab, emission=EMISSION)
    corpus.save_corpus(shifted, out / SHIFTED_DIR)

    summary = dict(train_seconds=time.perf_counter() - started, final_loss=report.epoch_losses[-1],
                   clean_wer=evaluate(model, clean).wer, shifted_wer=evaluate(model, shifted).wer)
    log.info("reference assets: %s", summary)
    return summary


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(build(sys.argv[1] if len(sys.argv) > 1 else None))

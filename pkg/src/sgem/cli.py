"""``sgem`` command line: corpus creation, source training, LM fitting,
adaptation, evaluation and ablation.

Every command exits 0 on success; failures print one ``error: ...`` line to
stderr and exit non-zero. Summary output is ``key=value`` pairs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import acoustic, adaptation, corpus, evaluation
from . import lm as lm_module
from .core import AdaptationConfig, ConfigError, Vocabulary, load_config, validate_config

log = logging.getLogger("sgem")

SEED_ENV = "SGEM_SEED"


class CommandError(Exception):
    """A user-facing failure with a one-line message."""


def _seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CommandError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _summary(**pairs) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in pairs.items()))


def _load_manifest(path) -> corpus.CorpusManifest:
    try:
        return corpus.read_manifest(path)
    except FileNotFoundError as exc:
        raise CommandError(str(exc) if exc.filename is None else f"{exc.filename}: no such file") from None


def _load_model(path):
    try:
        return acoustic.load_checkpoint(path)
    except FileNotFoundError:
        raise CommandError(f"{path}: no such checkpoint") from None


def _load_lm(path, vocab: Vocabulary):
    try:
        return lm_module.load(path, vocab)
    except FileNotFoundError:
        raise CommandError(f"{path}: no such LM file") from None


def _config(args) -> AdaptationConfig:
    """Built-in defaults, then the config file, then command-line flags."""
    config = load_config(args.config) if getattr(args, "config", None) else AdaptationConfig()
    overrides = {}
    if getattr(args, "decode", None):
        overrides["inference_decode"] = args.decode
    if getattr(args, "seed", None) is not None or os.environ.get(SEED_ENV) is not None:
        if getattr(args, "config", None) is None or getattr(args, "seed", None) is not None:
            overrides["seed"] = _seed(getattr(args, "seed", None))
    return validate_config(config.replace(**overrides), require_objective=False)


# -- commands ---------------------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    if args.n < 0:
        raise CommandError("--n must be non-negative")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"{out}: cannot create directory ({exc.strerror})") from None
    seed = _seed(args.seed)
    shift = None if args.shift == "none" else args.shift
    corpus.parse_shift(args.shift)
    manifest = corpus.make_synthetic_corpus(Vocabulary.default(), args.n, seed=seed, out_dir=out,
                                            shift=shift, snr_db=args.snr_db)
    _summary(utterances=len(manifest), seed=seed, shift=args.shift, snr_db=args.snr_db,
             manifest=out / "manifest.jsonl")
    return 0


def cmd_train_source(args) -> int:
    manifest = _load_manifest(args.manifest)
    utterances = manifest.utterances()
    if not utterances:
        raise CommandError("manifest has no utterances")
    seed = _seed(args.seed)
    vocab = Vocabulary.default()
    model = acoustic.build_model(args.mode, vocab, utterances[0].features.shape[1], seed=seed)
    config = acoustic.TrainingConfig(seed=seed) if args.epochs is None else \
        acoustic.TrainingConfig(epochs=args.epochs, seed=seed)
    model, report = acoustic.train_source(model, utterances, config)
    if report.diverged:
        partial = Path(str(args.out) + ".partial")
        acoustic.save_checkpoint(model, partial)
        raise CommandError(f"training diverged after {report.steps} steps; kept {partial}")
    acoustic.save_checkpoint(model, args.out)
    final = report.epoch_losses[-1] if report.epoch_losses else float("nan")
    _summary(mode=model.mode, epochs=len(report.epoch_losses), steps=report.steps, final_loss=final,
             checkpoint=args.out)
    return 0


def cmd_fit_lm(args) -> int:
    manifest = _load_manifest(args.manifest)
    refs = [e.reference for e in manifest if e.reference]
    if not refs:
        raise CommandError("manifest has no references to fit an LM on")
    model = lm_module.fit(refs, Vocabulary.default(), n=args.order)
    model.save(args.out)
    _summary(order=args.order, transcripts=len(refs), contexts=len(model.rows), lm=args.out)
    return 0


def _write_results(path, utterances, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, r in zip(utterances, results):
            row = {"id": r.utterance_id, "ref": u.reference,
                   "hyp_before": r.transcript_before, "hyp_after": r.transcript_after,
                   "wer_before": None, "wer_after": None,
                   "losses": [b.total for b in r.loss_trajectory], "fallback": r.fallback_used}
            if u.reference:
                row["wer_before"] = corpus.transcript_wer(u.reference, r.transcript_before)
                row["wer_after"] = corpus.transcript_wer(u.reference, r.transcript_after)
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_adapt(args) -> int:
    config = _config(args)
    model = _load_model(args.model)
    lm = _load_lm(args.lm, model.vocab)
    utterances = _load_manifest(args.manifest).utterances()
    results = adaptation.adapt_corpus(model, lm, utterances, config, jobs=args.jobs)
    _write_results(args.out, utterances, results)
    scored = [(u, r) for u, r in zip(utterances, results) if u.reference]
    pairs = dict(utterances=len(results), decode=config.inference_decode)
    if scored:
        refs = [u.reference for u, _ in scored]
        before = evaluation.score_pairs(refs, [r.transcript_before for _, r in scored]).wer
        after = evaluation.score_pairs(refs, [r.transcript_after for _, r in scored]).wer
        rel = (before - after) / before if before > 0 else 0.0
        pairs.update(wer_before=before, wer_after=after, relative_reduction=rel)
    pairs.update(fallbacks=sum(r.fallback_used for r in results), results=args.out)
    _summary(**pairs)
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    manifest = _load_manifest(args.manifest)
    lm = _load_lm(args.lm, model.vocab) if args.lm else None
    config = _config(args)
    if config.inference_decode == "beam" and lm is None:
        log.info("beam decoding without --lm: no shallow fusion")
    report = evaluation.evaluate(model, manifest.utterances(), config.inference_decode, lm,
                                 config.beam_width, config.lambda_lm if lm else 0.0)
    _summary(utterances=len(manifest), decode=config.inference_decode, wer=report.wer, cer=report.cer,
             errors=report.errors, words=report.words)
    if args.buckets:
        try:
            edges = [float(e) for e in args.buckets.split(",") if e.strip()]
        except ValueError:
            raise CommandError(f"--buckets must be comma-separated numbers, got {args.buckets!r}") from None
        buckets = corpus.bucket_by_length(manifest, edges)
        hyps = dict(zip([e.id for e in manifest], report.hypotheses))
        for label, bucket in zip(corpus.bucket_labels(edges), buckets):
            if len(bucket) == 0:
                _summary(bucket=label, utterances=0, wer="n/a")
                continue
            sub = evaluation.score_pairs([e.reference for e in bucket], [hyps[e.id] for e in bucket])
            _summary(bucket=label, utterances=len(bucket), wer=sub.wer)
    return 0


def _mark(flag: bool) -> str:
    return "on" if flag else "off"


def cmd_ablate(args) -> int:
    config = _config(args)
    model = _load_model(args.model)
    lm = _load_lm(args.lm, model.vocab)
    utterances = _load_manifest(args.manifest).utterances()
    rows = adaptation.run_ablation(model, lm, utterances, config, jobs=args.jobs)
    for row in rows:
        _summary(beam_search=_mark(row.beam_search), gem=_mark(row.gem), ns=_mark(row.ns), wer=row.wer)
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate a synthetic corpus (optionally shifted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of utterances")
    p.add_argument("--seed", type=int, help=f"generation seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--shift", default="none", help="none, gauss or texture:K (K in 0..7)")
    p.add_argument("--snr-db", type=float, default=10.0, help="SNR of the injected shift")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-source", help="supervised training of a reference model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=("ctc", "ar"), default="ctc")
    p.add_argument("--seed", type=int, help=f"init/shuffle seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("fit-lm", help="fit the n-gram LM on a manifest's references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="LM file path")
    p.add_argument("--order", type=int, default=4)
    p.set_defaults(func=cmd_fit_lm)

    p = sub.add_parser("adapt", help="episodic test-time adaptation of every utterance")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--lm", required=True, help="LM file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="results JSON-lines file")
    p.add_argument("--decode", choices=("greedy", "beam"), help="inference decode for before/after")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="WER of a frozen model, optionally per length bucket")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--decode", choices=("greedy", "beam"))
    p.add_argument("--lm", help="LM file for beam decoding")
    p.add_argument("--config", help="key = value config file (beam width, LM weight)")
    p.add_argument("--buckets", help="comma-separated frame-count bucket edges")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="beam search / GEM / NS toggle grid")
    p.add_argument("--model", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--decode", choices=("greedy", "beam"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ValueError, OSError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``entadapt <subcommand> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 invariant
failure.  Every failure prints one line ``error[<kind>]: <message>`` to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from .adapt import evaluate_speaker, train_base
from .config import ExperimentConfig, load_config
from .corpus import generate_corpus, load_corpus
from .errors import ConfigError, ContractError, DataError, DegenerateMassError, DimensionError, NonFiniteError
from .experiment import load_report_snapshot, run_grid, write_reports
from .model import load_checkpoint, save_checkpoint
from .params import AdamState
from .selfcheck import run_selfcheck

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4
CURVE_HEADER = ("step", "train_loss", "train_dev_acc_code", "train_dev_acc_zero")


def _curve_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".curve.tsv")


def _load_model(cfg: ExperimentConfig):
    config, params, extra = load_checkpoint(cfg.path("checkpoint"))
    if config.d_feat != cfg.corpus.d_feat or config.vocab_size != cfg.corpus.vocab_size:
        raise DataError(f"checkpoint {cfg.path('checkpoint')} does not match the corpus dimensions")
    return config, params, extra


# ------------------------------------------------------------------ commands


def cmd_gen_corpus(cfg: ExperimentConfig, args) -> int:
    manifest = generate_corpus(cfg.corpus, cfg.path("corpus"))
    counts = " ".join(f"{k}={v}" for k, v in manifest["counts"].items())
    print(f"corpus written to {cfg.path('corpus')}: {len(manifest['train_speakers'])} train speakers, "
          f"{len(manifest['test_speakers'])} test speakers; {counts}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    corpus = load_corpus(cfg.path("corpus"))
    ckpt = cfg.path("checkpoint")
    params = adam = None
    start, curve = 0, []
    if args.resume:
        config, params, extra = load_checkpoint(ckpt)
        if config != cfg.model:
            raise ConfigError(f"checkpoint {ckpt} was trained with a different model section")
        state = extra.get("train_state")
        if state is None:
            raise DataError(f"checkpoint {ckpt} carries no training state to resume from")
        adam = AdamState.from_dict(state["adam"], params)
        start, curve = int(state["step"]), list(state.get("curve", []))
    result = train_base(corpus, cfg.model, cfg.train, params=params, adam=adam, start_step=start)
    curve += result.curve
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state = {"step": result.step, "adam": result.adam.to_dict(), "plan": asdict(cfg.train), "curve": curve}
    save_checkpoint(ckpt, cfg.model, result.params, {"train_state": state})
    with open(_curve_path(ckpt), "w") as fh:
        fh.write("\t".join(CURVE_HEADER) + "\n")
        for row in curve:
            fh.write("\t".join(repr(row.get(k, float("nan"))) for k in CURVE_HEADER) + "\n")
    last = curve[-1] if curve else {}
    print(f"checkpoint written to {ckpt} at step {result.step}; "
          + " ".join(f"{k}={last[k]:.4f}" for k in CURVE_HEADER[1:] if k in last))
    return EXIT_OK


def cmd_adapt(cfg: ExperimentConfig, args) -> int:
    corpus = load_corpus(cfg.path("corpus"))
    config, params, _ = _load_model(cfg)
    results = run_grid(corpus, config, params, cfg.adapt, cfg.path("out"), jobs=args.jobs)
    aborted = sum(len(r.aborted) for r in results)
    print(f"summary written to {cfg.path('out') / 'summary.tsv'}: {len(results)} cells, {aborted} aborted speakers")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    corpus = load_corpus(cfg.path("corpus"))
    config, params, _ = _load_model(cfg)
    if args.report:
        speaker, snapshot = load_report_snapshot(args.report)
        jobs = [(speaker, snapshot)]
    else:
        jobs = [(s, None) for s in corpus.speakers("test")]
    if not jobs:
        raise DataError("corpus has no test speakers")
    print("speaker_id\twer")
    for speaker, snapshot in jobs:
        utts = corpus.get(speaker, "test")
        if not utts:
            raise DataError(f"speaker {speaker} has no test utterances")
        print(f"{speaker}\t{evaluate_speaker(speaker, config, params, snapshot, utts).wer!r}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    summary = Path(args.summary) if args.summary else cfg.path("out") / "summary.tsv"
    out = Path(args.out) if args.out else cfg.path("out") / "plots"
    ablations = {}
    for item in args.ablation:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"--ablation expects LABEL=TSV, got {item!r}")
        ablations[label] = path
    for p in write_reports(summary, out, ablations):
        print(p)
    return EXIT_OK


def cmd_selfcheck(cfg: ExperimentConfig | None, args) -> int:
    checks = run_selfcheck(corrupt_op=args.corrupt_op)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"error[invariant]: {len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "selfcheck": cmd_selfcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entadapt", description="Unsupervised test-time adaptation laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment configuration (JSON); defaults apply when omitted")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration entry, e.g. train.steps=200 (repeatable)")
    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="train the base model and training-speaker codes")
    p.add_argument("--resume", action="store_true", help="continue from the training state in the checkpoint")
    p = sub.add_parser("adapt", parents=[common], help="run the adaptation grid and write the summary")
    p.add_argument("--jobs", type=int, default=1, help="parallel speaker jobs (results do not depend on it)")
    p = sub.add_parser("evaluate", parents=[common], help="test-set WER of the unadapted model or a stored report")
    p.add_argument("--report", help="per-speaker report JSON whose adapted tensors to evaluate")
    p = sub.add_parser("report", parents=[common], help="derive plot-data CSVs from a summary TSV")
    p.add_argument("--summary", help="summary TSV (default: <out>/summary.tsv)")
    p.add_argument("--out", help="output directory (default: <out>/plots)")
    p.add_argument("--ablation", action="append", default=[], metavar="LABEL=TSV",
                   help="summary of an injection-layer variant to include (repeatable)")
    p = sub.add_parser("selfcheck", help="run the invariant suite")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error[{kind}]: {text}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck(None, args)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DataError, OSError, json.JSONDecodeError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (ContractError, DimensionError, NonFiniteError, DegenerateMassError) as exc:
        return _fail("invariant", exc, EXIT_INVARIANT)


if __name__ == "__main__":
    sys.exit(main())

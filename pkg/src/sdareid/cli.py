"""Command line entry point: ``sdareid run | eval | emit-defaults``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from sdareid.config import METHODS, ConfigError, emit_defaults, load_config


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdareid", description="Continual few-shot re-identification benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="pretrain, adapt over the domain stream, evaluate")
    run.add_argument("config", type=Path, help="YAML config (an empty file means all defaults)")
    run.add_argument("out", type=Path, help="output directory")
    run.add_argument("--seed", type=int, help="override the master seed")
    run.add_argument("--method", choices=METHODS, help="override the adaptation method")
    run.add_argument("--dump-features", action="store_true", help="write refined test features to features.tsv")
    run.add_argument("--threads", type=int, default=1, help="evaluation worker threads")
    run.add_argument("--no-figures", action="store_true")

    ev = sub.add_parser("eval", help="score a saved checkpoint on dumped query/gallery sets")
    ev.add_argument("checkpoint", type=Path, help="checkpoint directory (holds bundle.json)")
    ev.add_argument("query", type=Path)
    ev.add_argument("gallery", type=Path)
    ev.add_argument("--raw", action="store_true", help="skip L2 normalisation of features")
    ev.add_argument("--threads", type=int, default=1)

    em = sub.add_parser("emit-defaults", help="print the default config as YAML")
    em.add_argument("-o", "--output", type=Path, help="write to a file instead of stdout")
    return p


def _cmd_run(args) -> int:
    from sdareid.runner import RunFailed, prepare, results_rows, run_benchmark, write_run

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.method is not None:
        cfg = cfg.replace(method=args.method)
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    pre = prepare(cfg)
    failed = None
    try:
        record = run_benchmark(cfg, pre, threads=args.threads)
    except RunFailed as exc:
        record, failed = exc.record, exc
    write_run(record, cfg, args.out, pre.stream, args.dump_features, not args.no_figures)
    for row in results_rows(record):
        print("\t".join(str(row.get(k, "")) for k in ("checkpoint", "protocol", "domain", "mAP", "rank1")))
    if failed is not None:
        print(f"error: {failed}; partial results in {args.out}", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    from sdareid.data import load_dataset
    from sdareid.evaluation import evaluate_retrieval
    from sdareid.model import load_bundle

    bundle = load_bundle(args.checkpoint)
    query, gallery = load_dataset(args.query), load_dataset(args.gallery)
    res = evaluate_retrieval(bundle, query, gallery, not args.raw, args.threads)
    print("domain\tmAP\trank1\trank5\trank10\tquery_count")
    print(f"{res.domain}\t{res.mAP!r}\t{res.rank(1)!r}\t{res.rank(5)!r}\t{res.rank(10)!r}\t{res.query_count}")
    return 0


def _cmd_emit(args) -> int:
    text = emit_defaults()
    if args.output:
        args.output.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    handlers = {"run": _cmd_run, "eval": _cmd_eval, "emit-defaults": _cmd_emit}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except Exception as exc:  # any failure becomes a diagnostic and a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

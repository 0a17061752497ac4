"""Command-line entry point: ``fedxrec {prepare,train,evaluate,sweep,report}``.

Exit code 0 on success; on failure a one-line JSON error object goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as ddata
from .experiment import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    evaluate_saved,
    load_config,
    prepare_data,
    report,
    run_experiment,
    set_path,
)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}", item)
        cfg = set_path(cfg, key.strip(), _parse_value(value))
    # Dedicated flags win over the file and over --set.
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if args.variant is not None:
        cfg = set_path(cfg, "train.variant", args.variant)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "no_sweep", False):
        cfg = replace(cfg, sweep={})
    return cfg.validate()


def cmd_prepare(args) -> dict:
    cfg = build_config(args)
    out = Path(cfg.out)
    written = []
    for seed in cfg.seeds:
        for d in prepare_data(cfg, seed):
            path = out / "data" / f"s{seed}" / f"d{d.domain_id}.npz"
            path.parent.mkdir(parents=True, exist_ok=True)
            ddata.save_dataset(d, path)
            written.append(str(path))
    (out / "config.json").write_text(dump_config(cfg))
    return {"datasets": written}


def cmd_train(args) -> dict:
    cfg = replace(build_config(args), save_checkpoints=True)
    out = run_experiment(cfg, evaluate=args.evaluate)
    return {"out": str(out)}


def cmd_evaluate(args) -> dict:
    out = evaluate_saved(args.out, mixed=args.mixed)
    return {"results": str(out / "results.csv")}


def cmd_sweep(args) -> dict:
    cfg = build_config(args)
    out = run_experiment(cfg, evaluate=True)
    files = report(out)
    return {"out": str(out), "report": {k: str(v) for k, v in files.items()}}


def cmd_report(args) -> dict:
    files = report(args.out)
    return {k: str(v) for k, v in files.items()}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedxrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, action="append", help="run seed (repeatable; replaces the seed list)")
        p.add_argument("--variant", help="ablation variant")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config field, e.g. train.loss.gamma=0.1")
        return p

    with_config(sub.add_parser("prepare", help="build and split datasets")).set_defaults(func=cmd_prepare)
    p = with_config(sub.add_parser("train", help="train every seed; saves checkpoints"))
    p.add_argument("--evaluate", action="store_true", help="also evaluate right after training")
    p.add_argument("--no-sweep", action="store_true", help="ignore sweep axes in the config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("evaluate", help="evaluate checkpoints from a train run")
    p.add_argument("--out", required=True)
    p.add_argument("--mixed", action="store_true", help="score interpolated item vectors")
    p.set_defaults(func=cmd_evaluate)
    with_config(sub.add_parser("sweep", help="train + evaluate every sweep point, then report")).set_defaults(
        func=cmd_sweep)
    p = sub.add_parser("report", help="tables and plot data for a finished run directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": "ConfigError", "field": exc.field, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

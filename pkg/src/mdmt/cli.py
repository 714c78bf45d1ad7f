"""Command line interface: ``mdmt {generate,train,evaluate,compare,show-config}``.

Exit status is 0 on success, 1 for configuration errors (including bad
flags) and 2 for runtime or numeric failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import PRESETS, apply_override, from_dict, load_config, preset
from .exceptions import ConfigError, MDMTError
from .trainer import Strategy

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH",
                     help="JSON experiment config (may name a 'preset' and override parts of it)")
    src.add_argument("--preset", choices=sorted(PRESETS), default=None,
                     help="use a built-in config instead of --config (default: desk_default)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. train.epochs=5; "
                        "VALUE is parsed as JSON; repeatable")
    p.add_argument("--output-dir", metavar="DIR", help="override output_dir from the config")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdmt", description=(
        "Semi-supervised multi-domain multi-task training on synthetic 3-D volumes."))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="generate both synthetic domain datasets")
    _common(p)

    p = sub.add_parser("train", help="train one strategy with one seed")
    _common(p)
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy],
                   help="training strategy")
    p.add_argument("--seed", type=int, required=True, help="model/shuffle seed")

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint file")
    p.add_argument("--split", required=True, choices=["train", "val", "test"], help="split to score")
    p.add_argument("--dataset", action="append", metavar="PATH", default=None,
                   help="dataset file(s) to score; default: both generated domains of the config")
    p.add_argument("--zeta", type=float, default=None,
                   help="ROI threshold for Dice (default: train.zeta of the config)")

    p = sub.add_parser("compare", help="run every strategy x seed and write the comparison table")
    _common(p)
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="override the seed list")
    p.add_argument("--strategies", nargs="+", choices=[s.value for s in Strategy], default=None,
                   help="override the strategy list")

    p = sub.add_parser("show-config", help="print the fully resolved config as JSON")
    _common(p)
    return parser


def resolve_config(args):
    raw = load_config(args.config) if args.config else preset(args.preset or "desk_default")
    for item in args.overrides:
        raw = apply_override(raw, item)
    if args.output_dir:
        raw = apply_override(raw, f"output_dir={json.dumps(args.output_dir)}")
    if getattr(args, "seeds", None):
        raw = apply_override(raw, f"seeds={json.dumps(args.seeds)}")
    if getattr(args, "strategies", None):
        raw = apply_override(raw, f"strategies={json.dumps(args.strategies)}")
    return from_dict(raw)


def run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "generate":
        for path in harness.cmd_generate(cfg):
            print(path)
    elif args.command == "train":
        folder = harness.cmd_train(cfg, args.strategy, args.seed)
        print(folder)
        print((folder / "report.json").read_text(), end="")
    elif args.command == "evaluate":
        datasets = args.dataset or [harness.dataset_path(cfg, 1), harness.dataset_path(cfg, 2)]
        zeta = args.zeta if args.zeta is not None else cfg.train_config(cfg.strategies[0], 0).zeta
        print(json.dumps(harness.cmd_evaluate(args.checkpoint, datasets, args.split, zeta),
                         indent=2, sort_keys=True))
    elif args.command == "compare":
        report = harness.cmd_compare(cfg, jobs=args.jobs)
        print(harness.format_table(report), end="")
        if any(r.get("status") != "ok" for r in report["rows"]):
            return EXIT_RUNTIME
    elif args.command == "show-config":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MDMTError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Batch command-line interface.

Verbs: run (execute an experiment config or preset), report (plots and
comparison table from a results tree), list-presets, verify (invariant
suite), import-data (convert an official dataset download into the local
cache). Exit codes: 0 success, 2 validation error, 3 runtime or numerics
error. The cache directory comes from --cache or $SPLITSIM_CACHE.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import PRESETS, ExperimentConfig, preset
from .data import CACHE_ENV, IMPORTERS
from .errors import ConfigError, IngestionError, SplitSimError, UsageError


def _apply_overrides(d: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        d[key.strip()] = value
    return d


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        base = dict(PRESETS[args.preset]) if args.preset in PRESETS else None
        if base is None:
            raise ConfigError(f"unknown preset {args.preset!r}; see list-presets")
    elif args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    else:
        raise ConfigError("provide a config file or --preset")
    _apply_overrides(base, args.set or [])
    if args.seeds:
        base["seeds"] = [int(s) for s in args.seeds.split(",")]
    return ExperimentConfig.from_dict(base)


def cmd_run(args) -> int:
    from .harness import run_experiment

    config = _load_config(args)
    exp_dir = run_experiment(config, args.out)
    print(exp_dir)
    return 0


def cmd_report(args) -> int:
    from .harness import emit_report

    for path in emit_report(args.results_dir, args.out):
        print(path)
    return 0


def cmd_list_presets(args) -> int:
    width = max(len(n) for n in PRESETS)
    for name in sorted(PRESETS):
        config = preset(name)
        print(f"{name:<{width}}  {config.dataset} {config.arch} "
              f"{config.mode} s={config.level} attack={config.attack} "
              f"iters={config.iterations} seeds={len(config.seeds)}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    return 0 if run_checks() else 3


def cmd_import_data(args) -> int:
    importer = IMPORTERS.get(args.dataset)
    if importer is None:
        raise ConfigError(
            f"no importer for {args.dataset!r}; available: {sorted(IMPORTERS)}"
        )
    print(importer(args.source_dir, args.cache))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsim",
        description="Split-learning simulator and inference-attack harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", nargs="?", help="path to a JSON config")
    p_run.add_argument("--preset", help="start from a named preset")
    p_run.add_argument("--out", default="results", help="results root directory")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (JSON-parsed value)")
    p_run.add_argument("--seeds", help="comma-separated seed list override")
    p_run.set_defaults(fn=cmd_run)

    p_report = sub.add_parser("report", help="emit plots and tables for results")
    p_report.add_argument("results_dir")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(fn=cmd_report)

    p_list = sub.add_parser("list-presets", help="show available presets")
    p_list.set_defaults(fn=cmd_list_presets)

    p_verify = sub.add_parser("verify", help="run the invariant check suite")
    p_verify.set_defaults(fn=cmd_verify)

    p_import = sub.add_parser(
        "import-data", help="convert an official dataset download into the cache"
    )
    p_import.add_argument("dataset", help="cifar10 | cifar100 | stl10 | tiny-imagenet")
    p_import.add_argument("source_dir")
    p_import.add_argument("--cache", default=None,
                          help=f"cache directory (default ${CACHE_ENV} or ~/.cache/splitsim)")
    p_import.set_defaults(fn=cmd_import_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SplitSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end: run one trial, run a batch, render figures."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import load_config, preset
from .harness import PLANNER_ORDER, run_batch, trial_prefix
from .simulation import run_trial


def _parse_seeds(text: str) -> list[int]:
    """'4' -> [4]; '0:10' -> 0..9; '1,3,9' -> [1, 3, 9]."""
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return list(range(int(lo), int(hi)))
        return [int(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected '4', '0:10', or '1,3,9', got {text!r}"
        ) from None


def _base_config(args: argparse.Namespace):
    if args.config is not None:
        return load_config(args.config)
    return preset(args.preset)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML trial config (overrides --preset)")
    p.add_argument(
        "--preset",
        default="smoke",
        choices=("smoke", "env100", "env200"),
        help="built-in configuration (default: smoke)",
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.planner is not None:
        cfg = replace(cfg, planner=replace(cfg.planner, name=args.planner))
    record = run_trial(cfg)
    paths = record.write(args.out, trial_prefix(cfg.seed))
    for key, val in record.summary.items():
        print(f"{key}={val}")
    print(f"tables: {', '.join(sorted(paths.values()))}")
    return 0


def cmd_batch(args: argparse.Namespace) -> int:
    cfg = _base_config(args)
    planners = args.planners.split(",") if args.planners else list(PLANNER_ORDER)
    summary = run_batch(cfg, args.seeds, planners, out_dir=args.out, progress=True)
    print(f"batch tables under {summary.out_dir}")
    if summary.failures:
        for name, seed, err in summary.failures:
            print(f"FAILED {name} seed={seed}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    from .render import plot_batch, plot_trial

    if args.prefix is not None:
        path = plot_trial(args.dir, args.prefix, args.out)
    else:
        path = plot_batch(args.dir, args.out, bin_m=args.bin)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emexplore",
        description="Multi-robot exploration trials with uncertainty-aware planning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single trial and write its tables")
    _add_config_args(p_run)
    p_run.add_argument("--seed", type=int, help="override the config seed")
    p_run.add_argument(
        "--planner", choices=PLANNER_ORDER, help="override the configured planner"
    )
    p_run.add_argument("--out", default="runs/single", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_batch = sub.add_parser("batch", help="run paired seeds across planners")
    _add_config_args(p_batch)
    p_batch.add_argument(
        "--seeds",
        type=_parse_seeds,
        default="0:10",
        help="'0:10', '3', or '1,4,9'",
    )
    p_batch.add_argument(
        "--planners", help="comma list (default: em2,em3,ce,bsp)", default=None
    )
    p_batch.add_argument("--out", default="runs/batch", help="output directory")
    p_batch.set_defaults(func=cmd_batch)

    p_render = sub.add_parser("render", help="render figures from written tables")
    p_render.add_argument("--dir", required=True, help="batch dir, or a planner dir with --prefix")
    p_render.add_argument("--prefix", help="trial prefix (e.g. seed00000) for a map view")
    p_render.add_argument("--out", default="figure.svg", help="output image path")
    p_render.add_argument("--bin", type=float, default=10.0, help="distance bin [m]")
    p_render.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

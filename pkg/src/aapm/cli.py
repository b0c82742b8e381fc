"""Command-line entry point.

Subcommands: ingest, make-synthetic, agent-run, embed, pretrain, train,
predict, portfolio, evaluate, sweep, report. Exit codes: 0 success,
2 config error, 3 missing-stage dependency, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, DependencyError, load_config
from .data import AlignmentError, ParseError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_RUNTIME = 4

STAGE_COMMANDS = {
    "ingest": "ingest",
    "agent-run": "agent",
    "embed": "embed",
    "pretrain": "pretrain",
    "train": "train",
    "predict": "predict",
    "portfolio": "portfolio",
    "evaluate": "evaluate",
    "report": "report",
}


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="INI config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="shortcut for --set run.seed=...")
    parser.add_argument("--output", help="shortcut for --set paths.output_dir=...")
    parser.add_argument("--force", action="store_true", help="redo the stage even if complete")
    parser.add_argument(
        "--tp-window", type=int, help="shortcut for --set portfolio.tp_window=..."
    )
    parser.add_argument(
        "--allow-repeat-retrieval",
        action="store_true",
        help="let refinement rounds retrieve items already seen for this news item",
    )


def _config_from_args(args: argparse.Namespace):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output:
        overrides.append(f"paths.output_dir={args.output}")
    if getattr(args, "tp_window", None) is not None:
        overrides.append(f"portfolio.tp_window={args.tp_window}")
    if getattr(args, "allow_repeat_retrieval", False):
        overrides.append("agent.allow_repeat_retrieval=true")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aapm",
        description="Agent-augmented asset pricing engine: news analysis, hybrid "
        "return prediction, portfolio construction, and evaluation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for command in STAGE_COMMANDS:
        p = sub.add_parser(command, help=f"run the {command} stage")
        _add_config_args(p)

    p = sub.add_parser("make-synthetic", help="generate a seeded synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-assets", type=int, default=50)
    p.add_argument("--n-days", type=int, default=500)
    p.add_argument("--n-factors", type=int, default=5)
    p.add_argument("--signal-mix", choices=["both", "factors", "news"], default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain-days", type=int, default=120)
    p.add_argument("--news-per-day", type=int, default=2)
    p.add_argument("--blocked-per-day", type=int, default=0)

    p = sub.add_parser("sweep", help="random hyperparameter search (or the N x K grid)")
    _add_config_args(p)
    p.add_argument("--spec", help="JSON sweep spec {objective, budget, params}")
    p.add_argument("--budget", type=int, help="number of random trials")
    p.add_argument("--objective", help="metric to optimize (default ew_sharpe_val)")
    p.add_argument(
        "--grid",
        action="store_true",
        help="exhaustive analysis depth (n_rounds) x width (top_k) grid instead of random search",
    )
    p.add_argument("--grid-rounds", default="1,2,3,4,5", help="comma list of n_rounds for --grid")
    p.add_argument("--grid-topk", default="1,2,3,4,5", help="comma list of top_k for --grid")
    p.add_argument("--sweep-dir", help="where to write trials.csv/best.json (default <output>/sweep)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as err:
        print(f"dependency error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ParseError, AlignmentError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - CLI boundary
        logging.getLogger(__name__).exception("runtime failure")
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "make-synthetic":
        from .synthetic import SyntheticSpec, make_synthetic

        spec = SyntheticSpec(
            n_assets=args.n_assets,
            n_days=args.n_days,
            n_factors=args.n_factors,
            signal_mix=args.signal_mix,
            seed=args.seed,
            n_pretrain_days=args.pretrain_days,
            news_per_day=args.news_per_day,
            blocked_per_day=args.blocked_per_day,
        )
        paths = make_synthetic(args.out_dir, spec)
        print(f"wrote synthetic dataset to {Path(args.out_dir).resolve()}")
        for name, path in sorted(paths.items()):
            print(f"  {name}: {path.name}")
        return EXIT_OK

    if args.command == "sweep":
        from .pipeline import run_dir_for
        from .sweep import SweepSpec, default_space, nk_grid, sweep

        cfg = _config_from_args(args)
        out = Path(args.sweep_dir) if args.sweep_dir else Path(cfg.get("paths", "output_dir")) / "sweep"
        if args.grid:
            n_values = tuple(int(x) for x in args.grid_rounds.split(","))
            k_values = tuple(int(x) for x in args.grid_topk.split(","))
            objective = args.objective or "ew_sharpe_val"
            results = nk_grid(cfg, out, n_values, k_values, objective, force=args.force)
            print(f"grid complete: {len(results)} cells -> {out / 'grid.csv'}")
            return EXIT_OK
        if args.spec:
            spec = SweepSpec.from_file(args.spec)
        else:
            spec = SweepSpec(params=default_space())
        if args.budget is not None:
            spec.budget = args.budget
            spec.__post_init__()
        if args.objective is not None:
            spec.objective = args.objective
            spec.__post_init__()
        best = sweep(cfg, spec, out, force=args.force)
        print(f"best trial: {best}")
        print(f"results: {out / 'trials.csv'}")
        return EXIT_OK

    # plain pipeline stage
    from .pipeline import run_stage

    cfg = _config_from_args(args)
    stage = STAGE_COMMANDS[args.command]
    run_dir = run_stage(stage, cfg, force=args.force)
    print(f"stage {stage} complete: {run_dir / stage}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

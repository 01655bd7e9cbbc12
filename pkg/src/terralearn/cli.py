"""Command line entry point: ``terralearn run`` and ``terralearn compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from .config import CONTROLLERS, ExperimentConfig, load_config
from .errors import TerralearnError
from .harness import compare, run


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    experiment = {}
    if getattr(args, "controller", None):
        experiment["controller"] = args.controller
    if args.laps is not None:
        experiment["laps"] = args.laps
    if args.seed is not None:
        experiment["seed"] = args.seed
    if args.no_timing:
        experiment["timing"] = False
    sections = {"experiment": experiment}
    if args.track:
        sections["track"] = {"file": args.track}
    return cfg.replace(**sections)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (default: packaged defaults)")
    p.add_argument("--laps", type=int, help="laps to drive after convergence")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--track", help="track file with one 'x y' pair per line")
    p.add_argument("--out", help="output directory for logs")
    p.add_argument("--no-timing", action="store_true",
                   help="do not record wall-clock times, so outputs are byte-reproducible")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terralearn",
                                     description="Slope-driving experiments with an online GA learner.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--controller", choices=CONTROLLERS)

    p_cmp = sub.add_parser("compare", help="run baseline and learner side by side")
    _add_common(p_cmp)
    p_cmp.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: the config seed)")
    p_cmp.add_argument("--config-b", help="config for the second run (default: same as --config)")
    p_cmp.add_argument("--controllers", nargs=2, choices=CONTROLLERS, default=("baseline", "ga"),
                       metavar=("A", "B"), help="controllers for the two runs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _apply_overrides(load_config(args.config), args)
            result = run(cfg, args.out)
            print(json.dumps(asdict(result.summary), indent=2))
        else:
            cfg_a = _apply_overrides(load_config(args.config), args)
            cfg_b = _apply_overrides(load_config(args.config_b or args.config), args)
            cfg_a = cfg_a.replace(experiment={"controller": args.controllers[0]})
            cfg_b = cfg_b.replace(experiment={"controller": args.controllers[1]})
            report = compare(cfg_a, cfg_b, args.seeds, args.out)
            print(report["text"], end="")
    except (TerralearnError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

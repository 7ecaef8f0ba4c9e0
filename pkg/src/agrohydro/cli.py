"""Command-line interface.

Subcommands:
  scenario <1|2|3>   run a preset experiment
  run --config FILE  run a YAML-configured experiment
  place-sensors      report the greedy sensor selection for a column

Exit status: 0 on success, 1 on usage errors, 2 on numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import estimation as est
from . import placement, scenarios, soil

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; the CLI contract is 1
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _add_shared(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=None, help="RNG seed")
    parser.add_argument("--gamma", type=float, default=None,
                        help="fixed EM step size in (0, 1]")
    parser.add_argument("--days", type=float, default=None,
                        help="simulated horizon in days")
    parser.add_argument("--out", type=str, default=None,
                        help="output directory (default: results/, or $AGROHYDRO_OUT)")
    parser.add_argument("--substeps", type=int, default=None,
                        help="internal Euler substeps per sampling interval")


def _build_parser() -> _Parser:
    parser = _Parser(prog="agrohydro",
                     description="1D soil-moisture estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_scn = sub.add_parser("scenario", help="run a preset scenario")
    p_scn.add_argument("preset", choices=["1", "2", "3"])
    _add_shared(p_scn)

    p_run = sub.add_parser("run", help="run a YAML-configured scenario")
    p_run.add_argument("--config", required=True, type=str)
    _add_shared(p_run)

    p_place = sub.add_parser("place-sensors", help="sensor placement report")
    p_place.add_argument("--config", type=str, default=None,
                         help="YAML scenario file (defaults to preset 1)")
    p_place.add_argument("--preset", choices=["1", "2", "3"], default="1")
    mode = p_place.add_mutually_exclusive_group()
    mode.add_argument("--augmented", action="store_true",
                      help="require observability of states and unknown inputs")
    mode.add_argument("--states-only", action="store_true",
                      help="require observability of the states only (default)")
    _add_shared(p_place)
    return parser


def _apply_overrides(config: scenarios.ScenarioConfig,
                     args: argparse.Namespace) -> scenarios.ScenarioConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.days is not None:
        changes["horizon_days"] = args.days
    if args.substeps is not None:
        changes["substeps"] = args.substeps
    if args.gamma is not None:
        changes["schedule"] = est.StepSizeSchedule(kind="fixed", gamma0=args.gamma)
    return dataclasses.replace(config, **changes) if changes else config


def _run_and_emit(config: scenarios.ScenarioConfig, out: Optional[str]) -> int:
    result = scenarios.run_comparison(config)
    paths = scenarios.emit_results(result, scenarios.output_directory(out))
    for path in paths:
        print(path)
    return 0


def _place_sensors(args: argparse.Namespace) -> int:
    if args.config is not None:
        config = scenarios.build_scenario(Path(args.config))
    else:
        config = scenarios.build_scenario(int(args.preset))
    config = _apply_overrides(config, args)
    augmented = bool(args.augmented) and not args.states_only
    column = config.model_column()
    target = 2 * config.node_count if augmented else config.node_count
    x = config.x0_vector()
    traj = [x]
    inputs = []
    for k in range(target):
        u = config.irrigation.rate_at(k * config.dt)
        inputs.append(u)
        x = soil.step_state(x, u, column)
        traj.append(x)
    ranking = placement.select_sensors(column, traj, inputs, window=target,
                                       augmented=augmented)
    report = ranking.to_dict()

    out_dir = scenarios.output_directory(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "placement.json"
    path.write_text(json.dumps(report, indent=2) + "\n")

    print(f"mode: {report['mode']}")
    print(f"selected sensors (node indices): {report['selected_sensors']}")
    print(f"achieved rank: {report['achieved_rank']} / target {report['target_rank']}"
          f" (tolerance {report['rank_tolerance']:g})")
    print("ranked candidates (residual norms):")
    for node, score in zip(report["ranked_candidates"], report["residual_norms"]):
        print(f"  node {node:2d}: {score:.6e}")
    print(path)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else USAGE_ERROR
    try:
        if args.command == "scenario":
            config = _apply_overrides(scenarios.build_scenario(int(args.preset)), args)
            return _run_and_emit(config, args.out)
        if args.command == "run":
            config = _apply_overrides(
                scenarios.build_scenario(Path(args.config)), args)
            return _run_and_emit(config, args.out)
        if args.command == "place-sensors":
            return _place_sensors(args)
    except (scenarios.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (soil.IntegrationInstabilityError, est.IllConditionedUpdateError,
            placement.UnobservableConfigurationError,
            placement.DegenerateInputError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())

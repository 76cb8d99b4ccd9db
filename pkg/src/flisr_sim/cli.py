"""Scenario runner: validate topology files, execute runs, emit logs/reports.

Exit codes: 0 full restoration of all restorable loads, 1 partial/unserved,
2 invariant violation during the run, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import grid, sim

EXIT_FULL = 0
EXIT_PARTIAL = 1
EXIT_INVARIANT = 2
EXIT_CONFIG = 3


def bundled_path(name: str) -> Path:
    """Path of a bundled data file (topology/scenario shipped in the package)."""
    return Path(str(resources.files("flisr_sim").joinpath("data", name)))


def validate(topology_path: str | Path) -> list[str]:
    """Diagnostics for a topology file; empty means it is runnable."""
    path = Path(topology_path)
    if not path.exists():
        return [f"{path}: file not found"]
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        return [f"{path}:{err.lineno}:{err.colno}: parse error: {err.msg}"]
    return [f"{path}: {d}" for d in grid.validate_topology_dict(data)]


def _render_report(report: dict, out) -> None:
    out.write(f"run: topology={report['topology']} scenario={report['scenario']}"
              f" seed={report['seed']}\n")
    out.write(f"exit status: {report['exit_status']}   goal: {report['goal_state']}\n")
    trip = report.get("trip")
    if trip:
        out.write(f"trip: {trip['switch']} (feeder {trip['feeder']}) at t={trip['tick']}\n")
    seg = report.get("fault_segment")
    if seg:
        out.write(f"fault segment: {seg['segment']} between {seg['upstream']}"
                  f" and {seg['downstream']}\n")
    if report.get("isolation_actions"):
        acts = ", ".join(f"{a['switch']}->{a['position']}" for a in report["isolation_actions"])
        out.write(f"isolation: {acts}\n")
    for load_id, outcome in sorted(report.get("restoration", {}).items()):
        if outcome is None:
            continue
        line = f"  {load_id}: {outcome['outcome']}"
        if outcome.get("source"):
            line += f" (source {outcome['source']})"
        out.write(line + "\n")
    out.write("energization:\n")
    for load_id, src in sorted(report["energization"].items()):
        out.write(f"  {load_id} <- {src if src else 'unserved'}\n")
    out.write(f"radial: {report['radial']}\n")


def run_scenario(
    topology_path: str | Path,
    scenario_path: str | Path,
    seed: int | None = None,
    latency: int | None = None,
    max_ticks: int | None = None,
    log_path: str | Path | None = None,
    fmt: str = "jsonl",
) -> int:
    diags = validate(topology_path)
    if diags:
        for d in diags:
            sys.stderr.write(d + "\n")
        return EXIT_CONFIG
    try:
        topology = grid.Topology.from_file(topology_path)
        scenario = sim.Scenario.from_file(scenario_path)
    except FileNotFoundError as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_CONFIG
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        sys.stderr.write(f"error: bad input file: {err}\n")
        return EXIT_CONFIG
    if seed is not None:
        scenario.seed = seed
    if max_ticks is not None:
        scenario.tick_budget = max_ticks
    if scenario.tick_budget <= 0:
        sys.stderr.write("error: tick budget must be positive\n")
        return EXIT_CONFIG
    config = sim.SimConfig()
    if latency is not None:
        try:
            config = sim.SimConfig(message_latency=latency)
        except ValueError as err:
            sys.stderr.write(f"error: {err}\n")
            return EXIT_CONFIG

    try:
        result = sim.run(topology, scenario, config)
    except sim.ScenarioError as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_CONFIG

    if log_path is None:
        sim.write_events(result.events, sys.stdout, fmt)
        _render_report(result.report, sys.stderr)
    else:
        with open(log_path, "w") as fh:
            sim.write_events(result.events, fh, fmt)
        _render_report(result.report, sys.stdout)

    if result.exit_status == sim.EXIT_INVARIANT:
        return EXIT_INVARIANT
    if result.report["restorable_unserved"]:
        return EXIT_PARTIAL
    return EXIT_FULL


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="flisr-sim",
        description="Agent-team FLISR simulator for radial distribution utilities",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario and emit log + report")
    p_run.add_argument("--topology", required=True, help="topology file (JSON)")
    p_run.add_argument("--scenario", required=True, help="scenario file (JSON)")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--latency", type=int, default=None, help="message latency in ticks")
    p_run.add_argument("--max-ticks", type=int, default=None, help="tick budget override")
    p_run.add_argument("--log", default=None, help="event log destination (default stdout)")
    p_run.add_argument("--format", choices=("jsonl", "text"), default="jsonl")

    p_val = sub.add_parser("validate", help="check a topology file's invariants")
    p_val.add_argument("--topology", required=True)

    args = parser.parse_args(argv)
    if args.command == "validate":
        diags = validate(args.topology)
        if diags:
            for d in diags:
                sys.stderr.write(d + "\n")
            return EXIT_CONFIG
        print(f"{args.topology}: ok")
        return EXIT_FULL
    return run_scenario(
        args.topology,
        args.scenario,
        seed=args.seed,
        latency=args.latency,
        max_ticks=args.max_ticks,
        log_path=args.log,
        fmt=args.format,
    )


if __name__ == "__main__":
    sys.exit(main())

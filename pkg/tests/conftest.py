"""Shared fixtures: bundled assets, random network generators, log checker."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import pytest

from flisr_sim import cli, grid, sim


@pytest.fixture()
def bundled_topology_dict() -> dict:
    with open(cli.bundled_path("three_zone_utility.topology.json")) as fh:
        return json.load(fh)


@pytest.fixture()
def topology(bundled_topology_dict) -> grid.Topology:
    return grid.Topology.from_dict(bundled_topology_dict, name="three-zone")


@pytest.fixture()
def load1_scenario() -> sim.Scenario:
    return sim.Scenario.from_file(cli.bundled_path("load1_fault.scenario.json"))


# ---------------------------------------------------------------------------
# Random single-feeder generator with an independent location oracle


@dataclass
class GeneratedFeeder:
    topology: grid.Topology
    # Built during generation, independently of the topology code under test:
    parent_edge: dict[str, tuple[str, str]]  # segment -> (switch, parent segment)
    child_edges: dict[str, list[str]]  # segment -> switches hanging below it
    segments: list[str] = field(default_factory=list)

    def oracle_detections(self, fault_segment: str) -> dict[str, bool]:
        """Which switches carry fault current: walk the known parent chain."""
        path = set()
        seg = fault_segment
        while seg in self.parent_edge:
            sw, seg = self.parent_edge[seg]
            path.add(sw)
        return {sw.id: (sw.id in path) for sw in self.topology.switches}

    def oracle_bounds(self, fault_segment: str) -> tuple[str, frozenset[str]] | None:
        if fault_segment not in self.parent_edge:
            return None  # fault on the bus itself: nothing detects
        upstream = self.parent_edge[fault_segment][0]
        return upstream, frozenset(self.child_edges.get(fault_segment, []))


def make_random_feeder(rng: random.Random) -> GeneratedFeeder:
    n_switches = rng.randint(2, 8)
    segments = ["BUS"]
    switches = []
    parent_edge: dict[str, tuple[str, str]] = {}
    child_edges: dict[str, list[str]] = {"BUS": []}
    for i in range(n_switches):
        seg = f"SEG{i}"
        parent = segments[rng.randrange(len(segments))]
        sw_id = f"SW{i}"
        kind = "CB" if parent == "BUS" else "ROS"
        switches.append({"id": sw_id, "kind": kind, "normal": "Closed",
                         "endpoints": [parent, seg]})
        parent_edge[seg] = (sw_id, parent)
        child_edges.setdefault(seg, [])
        child_edges[parent].append(sw_id)
        segments.append(seg)
    data = {
        "segments": segments,
        "sources": [{"id": "SRC", "capacity_kw": 10_000, "segment": "BUS"}],
        "switches": switches,
        "loads": [
            {"id": f"L{i}", "demand_kw": 100, "segment": f"SEG{i}"}
            for i in range(n_switches)
        ],
        "routes": {},
    }
    topo = grid.Topology.from_dict(data, name="random-feeder")
    return GeneratedFeeder(
        topology=topo, parent_edge=parent_edge, child_edges=child_edges,
        segments=segments,
    )


# ---------------------------------------------------------------------------
# Random multi-feeder utilities for scenario fuzzing


def make_random_utility(rng: random.Random) -> dict:
    n_feeders = rng.randint(2, 3)
    lengths = [rng.randint(2, 4) for _ in range(n_feeders)]
    segments: list[str] = []
    sources = []
    switches = []
    loads = []
    for f in range(1, n_feeders + 1):
        bus = f"BUS{f}"
        segments.append(bus)
        prev = bus
        for p in range(1, lengths[f - 1] + 1):
            seg = f"F{f}S{p}"
            segments.append(seg)
            sw_id = f"CB{f}" if p == 1 else f"R{f}{p - 1}"
            switches.append({
                "id": sw_id, "kind": "CB" if p == 1 else "ROS",
                "normal": "Closed", "endpoints": [prev, seg],
            })
            loads.append({
                "id": f"L{f}{p}", "demand_kw": rng.choice([60, 80, 100, 120]),
                "segment": seg,
            })
            prev = seg

    tie_specs = []  # (tie id, feeder a, pos a, feeder b, pos b)
    pairs = set()

    def add_tie(a: int, b: int) -> None:
        pa, pb = rng.randint(1, lengths[a - 1]), rng.randint(1, lengths[b - 1])
        key = (f"F{a}S{pa}", f"F{b}S{pb}")
        if key in pairs or key[::-1] in pairs:
            return
        pairs.add(key)
        tie_id = f"TIE{len(tie_specs)}"
        switches.append({
            "id": tie_id, "kind": "TIE", "normal": "Open",
            "endpoints": [key[0], key[1]],
        })
        tie_specs.append((tie_id, a, pa, b, pb))

    # Adjacent-feeder ties keep the whole switch graph connected.
    for f in range(1, n_feeders):
        add_tie(f, f + 1)
    if rng.random() < 0.4:
        add_tie(*rng.sample(range(1, n_feeders + 1), 2))

    demand = {f: sum(l["demand_kw"] for l in loads if l["segment"].startswith(f"F{f}S"))
              for f in range(1, n_feeders + 1)}
    for f in range(1, n_feeders + 1):
        factor = rng.choice([1.0, 1.5, 2.0])
        sources.append({
            "id": f"Z{f}", "capacity_kw": int(demand[f] * factor), "segment": f"BUS{f}",
        })

    def chain_switches(f: int, frm: int, to: int) -> list[str]:
        """Feeder-internal switches walking from position frm to position to."""
        out = []
        if frm < to:
            for p in range(frm, to):
                out.append(f"R{f}{p}")
        else:
            for p in range(frm - 1, to - 1, -1):
                out.append(f"CB{f}" if p == 0 else f"R{f}{p}")
        return out

    routes: dict[str, list[dict]] = {}
    for load in loads:
        f = int(load["segment"][1])
        p = int(load["segment"][3])
        options = [{"source": f"Z{f}", "path": chain_switches(f, p, 0)}]
        for tie_id, a, pa, b, pb in tie_specs:
            if a == f:
                other, landing, here = b, pb, pa
            elif b == f:
                other, landing, here = a, pa, pb
            else:
                continue
            path = chain_switches(f, p, here) + [tie_id] + chain_switches(other, landing, 0)
            options.append({"source": f"Z{other}", "path": path})
        options.sort(key=lambda r: len(r["path"]))
        routes[load["id"]] = options

    return {
        "segments": segments, "sources": sources, "switches": switches,
        "loads": loads, "routes": routes,
    }


def make_random_scenario(rng: random.Random, data: dict, with_failures: bool = True) -> dict:
    fault_segment = rng.choice([s for s in data["segments"] if not s.startswith("BUS")])
    scenario = {
        "faults": [{"tick": rng.randint(2, 8), "segment": fault_segment}],
        "agent_failures": [],
        "tick_budget": 160,
        "seed": rng.randint(0, 2**31),
    }
    if with_failures and rng.random() < 0.5:
        agents = [sw["id"] for sw in data["switches"]]
        for agent in rng.sample(agents, rng.randint(1, 2)):
            scenario["agent_failures"].append({"tick": rng.randint(1, 40), "agent": agent})
    return scenario


# ---------------------------------------------------------------------------
# Log-driven safety checker (reconstructs state from events alone)


def check_safety(topology: grid.Topology, events: list[sim.Event]) -> list[str]:
    violations: list[str] = []
    states = topology.normal_states()
    fault_segments: list[str] = []
    grants: list[tuple[str, str, int]] = []  # (load, source, kw)
    isolation_done = False
    trip_seen = False

    def capacity_check(tag: str) -> None:
        served, _ = grid.energization(topology, states)
        served_kw = grid.served_demand(topology, states)
        for src in topology.sources:
            outstanding = sum(
                kw for load, source, kw in grants
                if source == src.id and served.get(load) != src.id
            )
            if served_kw[src.id] + outstanding > src.capacity_kw:
                violations.append(
                    f"{tag}: {src.id} served {served_kw[src.id]} + committed"
                    f" {outstanding} > capacity {src.capacity_kw}"
                )

    for event in events:
        if event.type == "FaultInjected":
            fault_segments.append(event.detail["segment"])
        elif event.type == "Trip":
            trip_seen = True
        elif event.type == "Milestone":
            name = event.detail.get("milestone")
            if name == "isolation-command" and not trip_seen:
                violations.append(f"t={event.t}: isolation before any trip")
            if name == "isolation-complete":
                isolation_done = True
            elif name == "restoration-grant":
                grants.append(
                    (event.detail["load"], event.actor, event.detail["demand"])
                )
                capacity_check(f"t={event.t} grant")
        elif event.type == "PositionChanged":
            states, record = grid.apply_action(
                topology, states, event.actor, event.detail["position"]
            )
            if not record.radial:
                violations.append(f"t={event.t}: radiality lost at {event.actor}")
            if isolation_done:
                for seg in fault_segments:
                    if grid.fault_current_path(topology, states, seg):
                        violations.append(
                            f"t={event.t}: fault segment {seg} re-energized"
                        )
            capacity_check(f"t={event.t} switch")
    return violations

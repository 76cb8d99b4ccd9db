"""Electrical topology graph and the switching-level FLISR primitives.

Segments are vertices, switching units are edges. In normal operation the
closed-switch subgraph is a forest with exactly one zone-substation source
per tree: CB and ROS units are normally closed, TIE units between feeders are
normally open. Energization, fault-segment location and restoration-route
lookup are pure functions over this graph; demand and capacity are integer kW
so that grant arithmetic is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


CB = "CB"
ROS = "ROS"
TIE = "TIE"
OPEN = "Open"
CLOSED = "Closed"


class UnknownSwitch(KeyError):
    pass


class UnknownLoad(KeyError):
    pass


class UnknownSegment(KeyError):
    pass


class ContradictoryDetections(Exception):
    """A detecting switch lies downstream of a non-detecting one."""


class TopologyError(Exception):
    """Topology file violates a structural invariant."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


@dataclass(frozen=True)
class ZoneSubstation:
    id: str
    capacity_kw: int
    segment: str


@dataclass(frozen=True)
class SwitchingUnit:
    id: str
    kind: str  # CB | ROS | TIE
    normal_position: str  # Open | Closed
    endpoints: tuple[str, str]


@dataclass(frozen=True)
class Load:
    id: str
    demand_kw: int
    segment: str


@dataclass(frozen=True)
class RestorationRoute:
    """A predefined path of switch ids from a load toward an alternative source."""

    source: str
    path: tuple[str, ...]


@dataclass(frozen=True)
class FaultSegment:
    """Bounds of a located fault: the faulted segment sits just past upstream."""

    upstream: str
    downstream: frozenset[str]
    segment: str


@dataclass
class Topology:
    sources: list[ZoneSubstation]
    switches: list[SwitchingUnit]
    segments: list[str]
    loads: list[Load]
    routes: dict[str, list[RestorationRoute]] = field(default_factory=dict)
    spares: dict[str, str] = field(default_factory=dict)  # spare agent id -> covered switch id
    name: str = "topology"

    def __post_init__(self) -> None:
        self.switch_by_id = {s.id: s for s in self.switches}
        self.source_by_id = {s.id: s for s in self.sources}
        self.load_by_id = {l.id: l for l in self.loads}
        self.segment_set = set(self.segments)
        # segment -> [(switch, other_segment)] in declaration order
        self.adjacency: dict[str, list[tuple[SwitchingUnit, str]]] = {
            seg: [] for seg in self.segments
        }
        for sw in self.switches:
            a, b = sw.endpoints
            if a in self.adjacency:
                self.adjacency[a].append((sw, b))
            if b in self.adjacency:
                self.adjacency[b].append((sw, a))

    # -- constructors ------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, name: str = "topology") -> "Topology":
        diags = validate_topology_dict(data)
        if diags:
            raise TopologyError(diags)
        sources = [
            ZoneSubstation(s["id"], int(s["capacity_kw"]), s["segment"])
            for s in data["sources"]
        ]
        switches = [
            SwitchingUnit(
                s["id"], s["kind"], s["normal"], (s["endpoints"][0], s["endpoints"][1])
            )
            for s in data["switches"]
        ]
        loads = [Load(l["id"], int(l["demand_kw"]), l["segment"]) for l in data["loads"]]
        routes = {
            load_id: [RestorationRoute(r["source"], tuple(r["path"])) for r in rs]
            for load_id, rs in data.get("routes", {}).items()
        }
        spares = {s["id"]: s["for"] for s in data.get("spares", [])}
        return cls(
            sources=sources,
            switches=switches,
            segments=list(data["segments"]),
            loads=loads,
            routes=routes,
            spares=spares,
            name=name,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "Topology":
        path = Path(path)
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict(data, name=path.name)

    # -- state helpers ------------------------------------------------

    def normal_states(self) -> dict[str, str]:
        return {s.id: s.normal_position for s in self.switches}

    def total_demand(self, segment_ids: set[str] | None = None) -> int:
        return sum(
            l.demand_kw
            for l in self.loads
            if segment_ids is None or l.segment in segment_ids
        )

    def loads_on(self, segment: str) -> list[Load]:
        return [l for l in self.loads if l.segment == segment]


# ---------------------------------------------------------------------------
# Validation


def validate_topology_dict(data: dict) -> list[str]:
    """Structural diagnostics for a topology tree; empty list means valid."""
    diags: list[str] = []
    for key in ("sources", "switches", "segments", "loads"):
        if key not in data:
            diags.append(f"$.{key}: missing section")
    if diags:
        return diags

    segments = list(data["segments"])
    seg_set = set(segments)
    if len(seg_set) != len(segments):
        diags.append("$.segments: duplicate segment ids")

    seen_ids: set[str] = set()
    for i, src in enumerate(data["sources"]):
        where = f"$.sources[{i}]"
        if src["id"] in seen_ids:
            diags.append(f"{where}: duplicate id {src['id']!r}")
        seen_ids.add(src["id"])
        if src.get("segment") not in seg_set:
            diags.append(f"{where}: segment {src.get('segment')!r} not declared")
        if not isinstance(src.get("capacity_kw"), int) or src["capacity_kw"] < 0:
            diags.append(f"{where}: capacity_kw must be a non-negative integer")

    for i, sw in enumerate(data["switches"]):
        where = f"$.switches[{i}]"
        if sw["id"] in seen_ids:
            diags.append(f"{where}: duplicate id {sw['id']!r}")
        seen_ids.add(sw["id"])
        kind = sw.get("kind")
        if kind not in (CB, ROS, TIE):
            diags.append(f"{where}: kind must be one of CB/ROS/TIE, got {kind!r}")
        normal = sw.get("normal")
        if normal not in (OPEN, CLOSED):
            diags.append(f"{where}: normal must be Open or Closed, got {normal!r}")
        elif kind == TIE and normal != OPEN:
            diags.append(f"{where}: TIE units must be normally Open")
        elif kind in (CB, ROS) and normal != CLOSED:
            diags.append(f"{where}: {kind} units must be normally Closed")
        eps = sw.get("endpoints", [])
        if len(eps) != 2 or any(e not in seg_set for e in eps):
            diags.append(f"{where}: endpoints must name two declared segments")

    for i, load in enumerate(data["loads"]):
        where = f"$.loads[{i}]"
        if load["id"] in seen_ids:
            diags.append(f"{where}: duplicate id {load['id']!r}")
        seen_ids.add(load["id"])
        if load.get("segment") not in seg_set:
            diags.append(f"{where}: segment {load.get('segment')!r} not declared")
        if not isinstance(load.get("demand_kw"), int) or load["demand_kw"] <= 0:
            diags.append(f"{where}: demand_kw must be a positive integer")

    switch_ids = {sw["id"] for sw in data["switches"]}
    source_ids = {s["id"] for s in data["sources"]}
    load_ids = {l["id"] for l in data["loads"]}
    for load_id, rs in data.get("routes", {}).items():
        if load_id not in load_ids:
            diags.append(f"$.routes[{load_id!r}]: unknown load")
        for j, route in enumerate(rs):
            where = f"$.routes[{load_id!r}][{j}]"
            if route.get("source") not in source_ids:
                diags.append(f"{where}: unknown source {route.get('source')!r}")
            if not route.get("path"):
                diags.append(f"{where}: path must be non-empty")
            for sw_id in route.get("path", []):
                if sw_id not in switch_ids:
                    diags.append(f"{where}: path names unknown switch {sw_id!r}")

    for i, spare in enumerate(data.get("spares", [])):
        where = f"$.spares[{i}]"
        if spare.get("id") in seen_ids:
            diags.append(f"{where}: duplicate id {spare.get('id')!r}")
        if spare.get("for") not in switch_ids:
            diags.append(f"{where}: covers unknown switch {spare.get('for')!r}")

    if diags:
        return diags

    # Structural checks need a consistent graph, so they run last.
    diags.extend(_radial_diags(data))
    return diags


def _radial_diags(data: dict) -> list[str]:
    diags: list[str] = []
    segments = list(data["segments"])
    adjacency: dict[str, list[tuple[str, str, str]]] = {seg: [] for seg in segments}
    for sw in data["switches"]:
        a, b = sw["endpoints"]
        adjacency[a].append((sw["id"], b, sw["normal"]))
        adjacency[b].append((sw["id"], a, sw["normal"]))

    # Whole graph (all switches) must be connected.
    seen = set()
    stack = [segments[0]]
    while stack:
        seg = stack.pop()
        if seg in seen:
            continue
        seen.add(seg)
        for _, other, _ in adjacency[seg]:
            if other not in seen:
                stack.append(other)
    if seen != set(segments):
        missing = sorted(set(segments) - seen)
        diags.append(f"$.segments: not connected, unreachable: {missing}")

    # Normal closed subgraph: forest with exactly one source per tree.
    source_segs: dict[str, list[str]] = {}
    for src in data["sources"]:
        source_segs.setdefault(src["segment"], []).append(src["id"])
    visited: set[str] = set()
    for seg in segments:
        if seg in visited:
            continue
        component: set[str] = set()
        stack2 = [seg]
        while stack2:
            cur = stack2.pop()
            if cur in component:
                continue
            component.add(cur)
            visited.add(cur)
            for _sw_id, other, normal in adjacency[cur]:
                if normal == CLOSED and other not in component:
                    stack2.append(other)
        closed_edges = sum(
            1
            for sw in data["switches"]
            if sw["normal"] == CLOSED and sw["endpoints"][0] in component
        )
        if closed_edges != len(component) - 1:
            diags.append(
                f"$.switches: normal configuration has a closed loop near {seg!r}"
            )
        n_sources = sum(len(source_segs.get(s, [])) for s in component)
        if n_sources != 1:
            diags.append(
                f"$.segments: normal tree containing {seg!r} has {n_sources} sources"
                " (radial operation needs exactly one)"
            )
    return diags


# ---------------------------------------------------------------------------
# Energization


def _components(topology: Topology, states: dict[str, str]) -> dict[str, int]:
    """Map each segment to a component id under the closed switches."""
    comp: dict[str, int] = {}
    next_id = 0
    for seg in topology.segments:
        if seg in comp:
            continue
        stack = [seg]
        while stack:
            cur = stack.pop()
            if cur in comp:
                continue
            comp[cur] = next_id
            for sw, other in topology.adjacency[cur]:
                if states.get(sw.id) == CLOSED and other not in comp:
                    stack.append(other)
        next_id += 1
    return comp


def energization(
    topology: Topology, states: dict[str, str]
) -> tuple[dict[str, str | None], bool]:
    """Which source feeds each load, plus the radiality flag.

    A load maps to a source iff a closed-switch path joins their segments.
    Radiality is false iff some closed path connects two sources (equivalently
    some load could reach two sources); the offending loads map to the
    smallest source id for determinism.
    """
    comp = _components(topology, states)
    sources_in: dict[int, list[str]] = {}
    for src in topology.sources:
        sources_in.setdefault(comp[src.segment], []).append(src.id)
    radial = all(len(ids) <= 1 for ids in sources_in.values())
    served: dict[str, str | None] = {}
    for load in topology.loads:
        ids = sources_in.get(comp[load.segment], [])
        served[load.id] = sorted(ids)[0] if ids else None
    return served, radial


def served_demand(topology: Topology, states: dict[str, str]) -> dict[str, int]:
    """Total demand currently fed by each source."""
    served, _ = energization(topology, states)
    out = {src.id: 0 for src in topology.sources}
    for load_id, src_id in served.items():
        if src_id is not None:
            out[src_id] += topology.load_by_id[load_id].demand_kw
    return out


# ---------------------------------------------------------------------------
# Normal-configuration geometry (pre-fault upstream/downstream language)


def normal_tree_paths(topology: Topology) -> dict[str, tuple[str, list[str]]]:
    """For each segment: its normal-tree source and the switch path from it.

    Computed on the normal-position closed subgraph; TIE units never appear.
    Segments outside any source tree are absent from the result.
    """
    states = topology.normal_states()
    out: dict[str, tuple[str, list[str]]] = {}
    for src in topology.sources:
        stack: list[tuple[str, list[str]]] = [(src.segment, [])]
        seen = {src.segment}
        while stack:
            seg, path = stack.pop()
            out[seg] = (src.id, path)
            for sw, other in topology.adjacency[seg]:
                if states[sw.id] == CLOSED and other not in seen:
                    seen.add(other)
                    stack.append((other, path + [sw.id]))
    return out


def fault_current_path(
    topology: Topology, states: dict[str, str], fault_segment: str
) -> list[str]:
    """Closed switches carrying fault current: the source-to-fault path.

    Empty when the faulted segment is de-energized under the given states.
    """
    if fault_segment not in topology.segment_set:
        raise UnknownSegment(fault_segment)
    comp = _components(topology, states)
    feeding = [s for s in topology.sources if comp[s.segment] == comp[fault_segment]]
    path_switches: list[str] = []
    for src in sorted(feeding, key=lambda s: s.id):
        # BFS from the source along closed switches to the fault segment.
        prev: dict[str, tuple[str, str] | None] = {src.segment: None}
        queue = [src.segment]
        while queue:
            seg = queue.pop(0)
            if seg == fault_segment:
                break
            for sw, other in topology.adjacency[seg]:
                if states.get(sw.id) == CLOSED and other not in prev:
                    prev[other] = (seg, sw.id)
                    queue.append(other)
        seg = fault_segment
        while prev.get(seg) is not None:
            back = prev[seg]
            assert back is not None
            seg, sw_id = back
            if sw_id not in path_switches:
                path_switches.append(sw_id)
    return path_switches


# ---------------------------------------------------------------------------
# Fault-segment location


def locate_segment(
    topology: Topology, snapshot: dict[str, bool]
) -> FaultSegment | None:
    """Bound the faulted segment from latched per-switch detection flags.

    The upstream bound is the detecting switch farthest from its normal-tree
    source; the downstream bounds are the normally-closed switches just past
    it. Detections must form one contiguous source-to-switch path, otherwise
    the snapshot is contradictory.
    """
    detecting = [sw for sw, hit in snapshot.items() if hit]
    for sw in snapshot:
        if sw not in topology.switch_by_id:
            raise UnknownSwitch(sw)
    if not detecting:
        return None

    geometry = normal_tree_paths(topology)
    # Resolve each detecting switch to (source, hop distance, far segment).
    info: dict[str, tuple[str, int, str]] = {}
    for seg, (src_id, path) in geometry.items():
        if path:
            sw_id = path[-1]
            if sw_id not in info or len(path) > info[sw_id][1]:
                info[sw_id] = (src_id, len(path), seg)
    sources = {info[sw][0] for sw in detecting if sw in info}
    if any(sw not in info for sw in detecting) or len(sources) != 1:
        raise ContradictoryDetections(
            f"detections {sorted(detecting)} do not lie on one feeder"
        )

    upstream = max(detecting, key=lambda sw: (info[sw][1], sw))
    _, _, fault_seg = info[upstream]
    expected_path = set(geometry[fault_seg][1])
    if set(detecting) != expected_path:
        # Either a detecting switch off the source->upstream path, or a
        # non-detecting switch on it: both contradict a single fault.
        raise ContradictoryDetections(
            f"detecting set {sorted(detecting)} is not the contiguous path"
            f" {sorted(expected_path)} to segment {fault_seg!r}"
        )

    downstream = set()
    for sw, _other in topology.adjacency[fault_seg]:
        if sw.id == upstream or sw.normal_position != CLOSED:
            continue
        downstream.add(sw.id)
    return FaultSegment(upstream=upstream, downstream=frozenset(downstream), segment=fault_seg)


# ---------------------------------------------------------------------------
# Switch actions and routes


@dataclass(frozen=True)
class ActionRecord:
    switch: str
    position: str
    changed: bool  # False for an idempotent no-op
    radial: bool


def apply_action(
    topology: Topology, states: dict[str, str], switch_id: str, position: str
) -> tuple[dict[str, str], ActionRecord]:
    """Set one switch position, returning new states and an action record."""
    if switch_id not in topology.switch_by_id:
        raise UnknownSwitch(switch_id)
    if position not in (OPEN, CLOSED):
        raise ValueError(f"position must be Open or Closed, got {position!r}")
    changed = states[switch_id] != position
    new_states = dict(states)
    new_states[switch_id] = position
    _, radial = energization(topology, new_states)
    return new_states, ActionRecord(switch_id, position, changed, radial)


def restoration_routes(topology: Topology, load_id: str) -> list[RestorationRoute]:
    """Configured self-restoration routes for a load, in priority order."""
    if load_id not in topology.load_by_id:
        raise UnknownLoad(load_id)
    return list(topology.routes.get(load_id, []))

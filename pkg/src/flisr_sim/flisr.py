"""FLISR goal hierarchy, its allocation to teams, and restoration planning.

The goal model mirrors the protection decomposition: FLISR is a sequence of
fault detection (a parallel of per-switch monitor goals owned by the switch
agents) followed by fault resolution, itself a sequence of fault isolation
(owned by the tripped feeder's team) and fault restoration (owned by the
substation team, which holds the self-restoration route maps). Restoration
requests propagate hop by hop along the route's switching units; grants come
back from the zone substations and are committed per episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from . import grid
from .bdi import (
    DataContext,
    GoalState,
    ProcessInstance,
    ProcessNode,
    TaskBehavior,
    choice,
    parallel,
    sequence,
    task,
)
from .ied import DeviceModel, ProtectionConfig, ln_pipeline_step
from .sim import Kernel, Message
from .teams import (
    Performer,
    Role,
    TaskTeam,
    TaskTeamStatus,
    Team,
    UnfillableRole,
    form_task_team,
    reform_task_team,
)

DEFAULT_THRESHOLD_A = 400.0


def _always(_ctx: DataContext) -> bool:
    return True


# ---------------------------------------------------------------------------
# Agents


class SwitchAgent:
    """Cyber-physical intelligence of one switching unit.

    Owns the IEC-61850-style device model, runs the protection pipeline every
    sample, answers detection queries from its latched pickup flag, executes
    open/close commands, and relays restoration requests along their path.
    """

    def __init__(
        self,
        agent_id: str,
        switch_id: str,
        session: "FlisrSession",
        trip_enabled: bool,
        config: ProtectionConfig | None = None,
    ):
        self.id = agent_id
        self.switch_id = switch_id
        self.session = session
        self.trip_enabled = trip_enabled
        self.config = config or ProtectionConfig(threshold_a=DEFAULT_THRESHOLD_A)
        self.device = DeviceModel(server=agent_id)
        self.alive = True

    def sample(self, kernel: Kernel) -> None:
        current = kernel.current_at(self.switch_id, self.config.threshold_a)
        kernel.emit("Sample", self.id, {"switch": self.switch_id, "amp": current})
        command = ln_pipeline_step(
            self.device, self.config, current, kernel.tick, self.trip_enabled
        )
        if command is not None:
            kernel.emit(
                "Trip",
                self.id,
                {"switch": self.switch_id, "amp": current, "effective": command.effective_tick},
            )
            kernel.schedule_position(
                self.switch_id, grid.OPEN, command.effective_tick, "protection-trip"
            )
            self.session.on_trip(kernel, self.switch_id)

    def handle_message(self, kernel: Kernel, message: Message) -> None:
        if message.kind == "Query":
            kernel.send(
                self.id,
                message.src,
                "Reply",
                {"switch": self.switch_id, "detected": self.device.detection_latched},
            )
        elif message.kind == "Command":
            position = message.payload["position"]
            due = kernel.tick + self.config.operate_delay
            kernel.schedule_position(
                self.switch_id, position, due, message.payload.get("purpose", "command")
            )
            kernel.send(
                self.id,
                message.src,
                "Ack",
                {"switch": self.switch_id, "position": position,
                 "noop": kernel.states[self.switch_id] == position},
            )
        elif message.kind == "Request":
            self._relay_request(kernel, message)
        elif message.kind == "Reset":
            self.device.reset_latch(kernel.tick)

    def _relay_request(self, kernel: Kernel, message: Message) -> None:
        payload = dict(message.payload)
        path = payload["path"]
        hop = payload["hop"]
        if hop + 1 < len(path):
            payload["hop"] = hop + 1
            nxt = self.session.resolve_switch_actor(path[hop + 1])
            if nxt is None:
                kernel.milestone(
                    self.id, "request-relay-dropped", {"load": payload["load"], "next": path[hop + 1]}
                )
                return
            kernel.send(self.id, nxt, "Request", payload)
        else:
            kernel.send(self.id, payload["source"], "Request", payload)


class ZoneAgent:
    """Zone substation intelligence: grants restoration capacity."""

    def __init__(self, source: grid.ZoneSubstation, session: "FlisrSession"):
        self.id = source.id
        self.source = source
        self.session = session
        self.alive = True
        self.commitments: list[dict[str, Any]] = []  # {load, kw}

    def outstanding_kw(self, kernel: Kernel) -> int:
        """Committed demand not yet delivered from this source."""
        served, _ = kernel.energization()
        return sum(
            c["kw"] for c in self.commitments if served.get(c["load"]) != self.id
        )

    def handle_message(self, kernel: Kernel, message: Message) -> None:
        if message.kind == "Reset":
            self.commitments.clear()
            return
        if message.kind != "Request":
            return
        payload = message.payload
        served_kw = grid.served_demand(self.session.topology, kernel.states)[self.id]
        result = grant(
            self.source,
            load_id=payload["load"],
            demand_kw=payload["demand"],
            served_kw=served_kw,
            outstanding_kw=self.outstanding_kw(kernel),
        )
        if result.granted:
            self.commitments.append({"load": payload["load"], "kw": payload["demand"]})
        kernel.milestone(
            self.id,
            "restoration-grant" if result.granted else "restoration-denied",
            {"load": payload["load"], "demand": payload["demand"],
             "remaining_kw": result.remaining_kw, "reason": result.reason},
        )
        kernel.send(
            self.id,
            payload["reply_to"],
            "Grant" if result.granted else "Deny",
            {"load": payload["load"], "source": self.id, "granted": result.granted,
             "remaining_kw": result.remaining_kw, "reason": result.reason},
        )


@dataclass(frozen=True)
class RestorationRequest:
    load: str
    demand_kw: int
    source: str
    path: tuple[str, ...]
    requester: str


@dataclass(frozen=True)
class RestorationGrant:
    load: str
    source: str
    granted: bool
    reason: str
    remaining_kw: int


def grant(
    source: grid.ZoneSubstation,
    load_id: str,
    demand_kw: int,
    served_kw: int,
    outstanding_kw: int,
) -> RestorationGrant:
    """Grant iff spare capacity covers the demand.

    spare = capacity - currently served demand - demand committed to earlier
    grants this episode (commitments are released as their loads come on).
    """
    if demand_kw <= 0:
        return RestorationGrant(load_id, source.id, False, "malformed-request", 0)
    spare = source.capacity_kw - served_kw - outstanding_kw
    if spare >= demand_kw:
        return RestorationGrant(load_id, source.id, True, "ok", spare - demand_kw)
    return RestorationGrant(load_id, source.id, False, "insufficient-capacity", max(spare, 0))


# ---------------------------------------------------------------------------
# Pure planning helpers


def isolate(segment: grid.FaultSegment) -> list[tuple[str, str]]:
    """Open commands isolating a located fault: every downstream bound.

    The upstream side is the path the fault current took; its breaker tripped
    already, so only the far-side switches need opening. An empty list means
    the trip alone isolated the segment (feeder tail).
    """
    return [(sw, grid.OPEN) for sw in sorted(segment.downstream)]


def route_chain(
    topology: grid.Topology, load: grid.Load, route: grid.RestorationRoute
) -> list[str] | None:
    """Segments walked from the load to the route's source, or None if the
    path does not form a contiguous walk ending at the source."""
    seg = load.segment
    chain = [seg]
    for sw_id in route.path:
        unit = topology.switch_by_id.get(sw_id)
        if unit is None or seg not in unit.endpoints:
            return None
        seg = unit.endpoints[1] if unit.endpoints[0] == seg else unit.endpoints[0]
        chain.append(seg)
    source = topology.source_by_id.get(route.source)
    if source is None or chain[-1] != source.segment:
        return None
    return chain


def _tree_path(
    topology: grid.Topology, states: dict[str, str], start: str, goal: str
) -> list[tuple[str, str]] | None:
    """Closed-switch path start->goal as (switch, next_segment) hops."""
    prev: dict[str, tuple[str, str] | None] = {start: None}
    queue = [start]
    while queue:
        seg = queue.pop(0)
        if seg == goal:
            hops: list[tuple[str, str]] = []
            while prev[seg] is not None:
                back = prev[seg]
                assert back is not None
                pseg, sw = back
                hops.append((sw, seg))
                seg = pseg
            hops.reverse()
            return hops
        for sw, other in topology.adjacency[seg]:
            if states.get(sw.id) == grid.CLOSED and other not in prev:
                prev[other] = (seg, sw.id)
                queue.append(other)
    return None


def plan_route_actions(
    topology: grid.Topology,
    states: dict[str, str],
    load: grid.Load,
    route: grid.RestorationRoute,
    fault_segments: list[str],
    spare_kw: int | None,
    served: dict[str, str | None],
) -> list[tuple[str, str]] | None:
    """Switch actions adopting a restoration route, or None when infeasible.

    Closes every open switch on the route path; computes the sectionalizing
    opens needed to keep radiality, keep every fault segment de-energized and
    (when ``spare_kw`` is known, i.e. after the grant) keep the picked-up
    unserved demand within the source's spare capacity at every intermediate
    step. Opens always execute before closes. The cut rule is "first switch
    beyond the kept route chain" on any offending path, which sheds the
    minimum; if the picked-up demand still exceeds the spare, every side
    branch off the chain is shed before giving up. ``spare_kw=None`` performs
    the capacity-blind trial used before requesting a grant.
    """
    chain = route_chain(topology, load, route)
    if chain is None:
        return None
    chain_set = set(chain)
    if any(f in chain_set for f in fault_segments):
        return None
    closes = [sw for sw in reversed(route.path) if states[sw] == grid.OPEN]
    route_switches = set(route.path)

    def find_cuts(trial: dict[str, str]) -> list[str] | None:
        cuts: list[str] = []
        comp = grid._components(topology, trial)
        merged = comp[load.segment]
        offenders = [
            src.segment
            for src in topology.sources
            if src.id != route.source and comp[src.segment] == merged
        ]
        offenders += [f for f in fault_segments if comp.get(f) == merged]
        for target in sorted(set(offenders)):
            hops = _tree_path(topology, trial, load.segment, target)
            if hops is None:
                continue
            cut = None
            seg = load.segment
            for sw, nxt in hops:
                if seg in chain_set and nxt not in chain_set:
                    cut = sw
                    break
                seg = nxt
            if cut is None or cut in route_switches:
                return None  # offense sits on the chain itself; route unusable
            if cut not in cuts:
                cuts.append(cut)
        return cuts

    trial = dict(states)
    for sw in closes:
        trial[sw] = grid.CLOSED
    cuts = find_cuts(trial)
    if cuts is None:
        return None
    for sw in cuts:
        trial[sw] = grid.OPEN

    def pickup_kw(state: dict[str, str]) -> int:
        """Newly picked-up demand in the component the route source now feeds."""
        new_served, _ = grid.energization(topology, state)
        return sum(
            l.demand_kw
            for l in topology.loads
            if new_served.get(l.id) == route.source and served.get(l.id) != route.source
        )

    if spare_kw is not None and pickup_kw(trial) > spare_kw:
        # Shed every branch hanging off the newly attached part of the chain
        # and retry with just the chain. Segments already inside the source's
        # tree keep their branches: that demand is being served either way.
        pre_comp = grid._components(topology, states)
        source_comp = pre_comp[topology.source_by_id[route.source].segment]
        for seg in chain:
            if pre_comp[seg] == source_comp:
                continue
            for sw, other in topology.adjacency[seg]:
                if (
                    sw.id not in route_switches
                    and trial.get(sw.id) == grid.CLOSED
                    and other not in chain_set
                    and sw.id not in cuts
                ):
                    cuts.append(sw.id)
                    trial[sw.id] = grid.OPEN
        if pickup_kw(trial) > spare_kw:
            return None

    actions = [(sw, grid.OPEN) for sw in cuts] + [(sw, grid.CLOSED) for sw in closes]

    # Full dry run: radiality after every action, fault segments never live,
    # and the source's capacity invariant holds at every intermediate step
    # (the load's commitment stays outstanding until it is actually served).
    check = dict(states)
    for sw, position in actions:
        check, record = grid.apply_action(topology, check, sw, position)
        if not record.radial:
            return None
        for f in fault_segments:
            if grid.fault_current_path(topology, check, f):
                return None
        if spare_kw is not None:
            mid_served, _ = grid.energization(topology, check)
            delivered = mid_served.get(load.id) == route.source
            if pickup_kw(check) + (0 if delivered else load.demand_kw) > spare_kw:
                return None
    final_served, _ = grid.energization(topology, check)
    if final_served.get(load.id) != route.source:
        return None
    return actions


def restoration_order(topology: grid.Topology) -> list[str]:
    """Deepest loads first (hop distance from their normal source), then id.

    Restoring from the feeder tail inward means an early tie close may pick
    up intermediate segments transiently and a later adoption sectionalizes
    them away, which is the interaction the scenario logs expect.
    """
    geometry = grid.normal_tree_paths(topology)
    def depth(load: grid.Load) -> int:
        entry = geometry.get(load.segment)
        return len(entry[1]) if entry else 0
    return [l.id for l in sorted(topology.loads, key=lambda l: (-depth(l), l.id))]


def plan_restoration(
    topology: grid.Topology,
    states: dict[str, str],
    fault_segments: list[str],
    capacities: dict[str, int] | None = None,
) -> dict[str, Any]:
    """Synchronous restoration plan: per-load route adoption with grants.

    The messaging-driven execution inside the goal model uses the same route
    trial and grant arithmetic; this entry point computes the whole plan in
    one call for inspection and testing.
    """
    capacities = capacities or {s.id: s.capacity_kw for s in topology.sources}
    committed: dict[str, list[tuple[str, int]]] = {s.id: [] for s in topology.sources}
    working = dict(states)
    actions: list[tuple[str, str]] = []
    outcomes: dict[str, dict[str, Any]] = {}
    grants: list[RestorationGrant] = []
    geometry = grid.normal_tree_paths(topology)
    granted_source: dict[str, str] = {}

    for load_id in restoration_order(topology):
        load = topology.load_by_id[load_id]
        served, _ = grid.energization(topology, working)
        normal = geometry.get(load.segment, (None, []))[0]
        current = served.get(load_id)
        if load.segment in fault_segments:
            outcomes[load_id] = {"outcome": "faulted-unserved"}
            continue
        if current == normal or (current is not None and granted_source.get(load_id) == current):
            outcomes[load_id] = {"outcome": "already-served", "source": current}
            continue
        adopted = False
        for route in grid.restoration_routes(topology, load_id):
            source = topology.source_by_id[route.source]
            if plan_route_actions(
                topology, working, load, route, fault_segments, None, served
            ) is None:
                continue
            served_kw = grid.served_demand(topology, working)[route.source]
            outstanding = sum(
                kw for lid, kw in committed[route.source] if served.get(lid) != route.source
            )
            decision = grant(
                grid.ZoneSubstation(source.id, capacities[route.source], source.segment),
                load_id, load.demand_kw, served_kw, outstanding,
            )
            grants.append(decision)
            if not decision.granted:
                continue
            plan = plan_route_actions(
                topology, working, load, route, fault_segments,
                decision.remaining_kw + load.demand_kw, served,
            )
            if plan is None:
                continue
            committed[route.source].append((load_id, load.demand_kw))
            granted_source[load_id] = route.source
            for sw, position in plan:
                working, _ = grid.apply_action(topology, working, sw, position)
            actions.extend(plan)
            outcomes[load_id] = {
                "outcome": "restored", "source": route.source, "path": list(route.path),
            }
            adopted = True
            break
        if not adopted:
            outcomes[load_id] = {"outcome": "unserved"}
    return {
        "actions": actions,
        "outcomes": outcomes,
        "grants": grants,
        "states": working,
    }


# ---------------------------------------------------------------------------
# Goal-model behaviors


class MonitorBehavior(TaskBehavior):
    """Per-switch vigilance goal: done once a trip is announced to the team."""

    def __init__(self, session: "FlisrSession", agent_id: str):
        self.session = session
        self.agent_id = agent_id

    def step(self, ctx: DataContext) -> GoalState:
        if ctx.get("trip") is not None:
            return GoalState.PASSED
        return GoalState.EXECUTING


class QueryDetectionsBehavior(TaskBehavior):
    """Query every bound switch monitor of the tripped feeder for its latch."""

    def __init__(self, session: "FlisrSession"):
        self.session = session
        self.sent: dict[str, tuple[str, int]] = {}  # switch -> (performer, deadline)
        self.replies: dict[str, bool] = {}
        self.retries: dict[str, int] = {}
        self.started = False

    def _timeout(self) -> int:
        return 2 * self.session.kernel.config.message_latency + 2

    def ready(self, ctx: DataContext) -> bool:
        kernel = self.session.kernel
        team_id = self.session.feeder_team_id(ctx.get("trip")["feeder"])
        if kernel.inboxes[team_id]:
            return True
        return any(kernel.tick >= deadline for _, deadline in self.sent.values())

    def step(self, ctx: DataContext) -> GoalState:
        kernel = self.session.kernel
        trip = ctx.get("trip")
        feeder = trip["feeder"]
        team_id = self.session.feeder_team_id(feeder)
        if not self.started:
            self.started = True
            self.replies[trip["switch"]] = True  # the breaker's latch came with the trip
            for switch in self.session.feeder_ros_switches(feeder):
                self._query(kernel, team_id, switch)
            if not self.sent:
                return self._finish(ctx)
            return GoalState.BLOCKED

        for message in kernel.inboxes[team_id]:
            if message.kind == "Reply":
                switch = message.payload["switch"]
                if switch in self.sent and switch not in self.replies:
                    self.replies[switch] = bool(message.payload["detected"])
                    kernel.milestone(
                        team_id, "detection-reply",
                        {"switch": switch, "detected": self.replies[switch]},
                    )
        kernel.inboxes[team_id].clear()

        for switch, (performer, deadline) in sorted(self.sent.items()):
            if switch in self.replies or kernel.tick < deadline:
                continue
            # Timed out: reformation may have produced a new binding to retry.
            current = self.session.resolve_switch_actor(switch)
            if current is not None and current != performer and self.retries.get(switch, 0) < 2:
                self.retries[switch] = self.retries.get(switch, 0) + 1
                self._query(kernel, team_id, switch)
            else:
                kernel.milestone(team_id, "detection-query-timeout", {"switch": switch})
                return GoalState.FAILED
        if all(sw in self.replies for sw in self.sent):
            return self._finish(ctx)
        return GoalState.BLOCKED

    def _query(self, kernel: Kernel, team_id: str, switch: str) -> None:
        performer = self.session.resolve_switch_actor(switch)
        if performer is None:
            self.sent[switch] = ("", kernel.tick)  # instantly overdue, no binding
            return
        kernel.milestone(team_id, "detection-query", {"switch": switch, "via": performer})
        kernel.send(team_id, performer, "Query", {"switch": switch})
        self.sent[switch] = (performer, kernel.tick + self._timeout())

    def _finish(self, ctx: DataContext) -> GoalState:
        ctx.set("snapshot", dict(sorted(self.replies.items())))
        return GoalState.PASSED


class LocateBehavior(TaskBehavior):
    def __init__(self, session: "FlisrSession"):
        self.session = session

    def step(self, ctx: DataContext) -> GoalState:
        kernel = self.session.kernel
        snapshot = ctx.get("snapshot")
        trip = ctx.get("trip")
        team_id = self.session.feeder_team_id(trip["feeder"])
        try:
            segment = grid.locate_segment(self.session.topology, snapshot)
        except grid.ContradictoryDetections as err:
            ctx.record_error("locate-fault", err)
            return GoalState.FAILED
        if segment is None:
            return GoalState.FAILED
        ctx.set("fault_segment", segment)
        kernel.milestone(
            team_id,
            "fault-located",
            {"segment": segment.segment, "upstream": segment.upstream,
             "downstream": sorted(segment.downstream)},
        )
        return GoalState.PASSED


class IsolateBehavior(TaskBehavior):
    """Open every downstream bound, one confirmed command at a time."""

    def __init__(self, session: "FlisrSession"):
        self.session = session
        self.pending: list[tuple[str, str]] | None = None
        self.awaiting: tuple[str, int] | None = None  # (switch, deadline)

    def step(self, ctx: DataContext) -> GoalState:
        kernel = self.session.kernel
        trip = ctx.get("trip")
        team_id = self.session.feeder_team_id(trip["feeder"])
        segment: grid.FaultSegment = ctx.get("fault_segment")
        if self.pending is None:
            self.pending = isolate(segment)
        if self.awaiting is not None:
            switch, deadline = self.awaiting
            if kernel.states[switch] == grid.OPEN:
                self.awaiting = None
            elif kernel.tick >= deadline:
                kernel.milestone(team_id, "isolation-timeout", {"switch": switch})
                return GoalState.FAILED
            else:
                return GoalState.EXECUTING
        if not self.pending:
            kernel.milestone(
                team_id, "isolation-complete",
                {"segment": segment.segment, "upstream": segment.upstream},
            )
            ctx.set("isolation_done", kernel.tick)
            self.session.isolated_segments.append(segment.segment)
            return GoalState.PASSED
        switch, position = self.pending.pop(0)
        kernel.milestone(team_id, "isolation-command", {"switch": switch, "position": position})
        if not self.session.command_switch(team_id, switch, position, "isolation"):
            return GoalState.FAILED
        deadline = kernel.tick + 2 * kernel.config.message_latency + 4
        self.awaiting = (switch, deadline)
        return GoalState.EXECUTING


class SkipRestorationBehavior(TaskBehavior):
    """No-op plan chosen when a load does not need restoration."""

    def __init__(self, session: "FlisrSession", load_id: str):
        self.session = session
        self.load_id = load_id

    def step(self, ctx: DataContext) -> GoalState:
        served, _ = self.session.kernel.energization()
        if self.load_id in self.session.fault_segment_loads():
            self.session.outcomes[self.load_id] = {"outcome": "faulted-unserved"}
        else:
            self.session.outcomes[self.load_id] = {
                "outcome": "already-served", "source": served.get(self.load_id),
            }
        return GoalState.PASSED


class MarkUnservedBehavior(TaskBehavior):
    """Fallback after the restoration goal exhausted every route."""

    def __init__(self, session: "FlisrSession", load_id: str):
        self.session = session
        self.load_id = load_id

    def step(self, ctx: DataContext) -> GoalState:
        kernel = self.session.kernel
        served, _ = kernel.energization()
        self.session.outcomes[self.load_id] = {
            "outcome": "unserved", "source": served.get(self.load_id),
        }
        kernel.milestone(
            self.session.substation_id, "restoration-unserved", {"load": self.load_id}
        )
        return GoalState.PASSED


class RestoreRouteBehavior(TaskBehavior):
    """One restoration plan: request a grant along the route, then switch.

    Phases: trial (local feasibility), request (hop-by-hop propagation),
    await grant, execute actions one confirmed switch at a time, verify.
    """

    def __init__(self, session: "FlisrSession", load_id: str, route: grid.RestorationRoute, index: int):
        self.session = session
        self.load_id = load_id
        self.route = route
        self.index = index
        self.phase = "trial"
        self.actions: list[tuple[str, str]] = []
        self.deadline = 0
        self.awaiting: tuple[str, str] | None = None  # (switch, position)

    def ready(self, ctx: DataContext) -> bool:
        if self.phase != "await-grant":
            return True
        kernel = self.session.kernel
        return bool(kernel.inboxes[self.session.substation_id]) or kernel.tick >= self.deadline

    def step(self, ctx: DataContext) -> GoalState:
        kernel = self.session.kernel
        sub = self.session.substation_id

        if self.phase == "trial":
            if not self.session.needs_restoration(self.load_id):
                served, _ = kernel.energization()
                self.session.outcomes[self.load_id] = {
                    "outcome": "already-served", "source": served.get(self.load_id),
                }
                return GoalState.PASSED
            load = self.session.topology.load_by_id[self.load_id]
            served, _ = kernel.energization()
            # Capacity is the zone's private knowledge: the pre-request trial
            # only establishes topological feasibility.
            plan = plan_route_actions(
                self.session.topology,
                kernel.states,
                load,
                self.route,
                self.session.kernel.fault_segments() + self.session.isolated_segments,
                None,
                served,
            )
            if plan is None:
                kernel.milestone(
                    sub, "route-infeasible",
                    {"load": self.load_id, "source": self.route.source, "route": self.index},
                )
                return GoalState.FAILED
            first_hop = self.session.resolve_switch_actor(self.route.path[0])
            if first_hop is None:
                return GoalState.FAILED
            kernel.milestone(
                sub, "restoration-requested",
                {"load": self.load_id, "source": self.route.source,
                 "path": list(self.route.path)},
            )
            kernel.send(
                sub, first_hop, "Request",
                {"load": self.load_id, "demand": load.demand_kw,
                 "source": self.route.source, "path": list(self.route.path),
                 "hop": 0, "reply_to": sub},
            )
            self.deadline = kernel.tick + 2 * kernel.config.message_latency * (len(self.route.path) + 2) + 4
            self.phase = "await-grant"
            return GoalState.BLOCKED

        if self.phase == "await-grant":
            inbox = kernel.inboxes[sub]
            verdict: Message | None = None
            keep: list[Message] = []
            for message in inbox:
                if message.kind in ("Grant", "Deny") and message.payload["load"] == self.load_id:
                    verdict = message
                elif message.kind != "Ack":  # command acks carry no further use
                    keep.append(message)
            kernel.inboxes[sub][:] = keep
            if verdict is None:
                if kernel.tick >= self.deadline:
                    kernel.milestone(
                        sub, "restoration-request-timeout",
                        {"load": self.load_id, "source": self.route.source},
                    )
                    return GoalState.FAILED
                return GoalState.BLOCKED
            if not verdict.payload["granted"]:
                return GoalState.FAILED
            self.session.granted[self.load_id] = (self.route.source, verdict.payload)
            # Re-plan against the granted spare: the transient pickup of the
            # tie close must fit the source's remaining capacity.
            load = self.session.topology.load_by_id[self.load_id]
            served, _ = kernel.energization()
            spare = verdict.payload["remaining_kw"] + load.demand_kw
            plan = plan_route_actions(
                self.session.topology,
                kernel.states,
                load,
                self.route,
                self.session.kernel.fault_segments() + self.session.isolated_segments,
                spare,
                served,
            )
            if plan is None:
                del self.session.granted[self.load_id]
                kernel.milestone(
                    sub, "route-infeasible",
                    {"load": self.load_id, "source": self.route.source, "route": self.index},
                )
                return GoalState.FAILED
            self.actions = plan
            self.phase = "act"
            return GoalState.EXECUTING

        if self.phase == "act":
            if self.awaiting is not None:
                switch, position = self.awaiting
                if kernel.states[switch] == position:
                    kernel.milestone(
                        sub,
                        "switch-closed" if position == grid.CLOSED else "switch-opened",
                        {"switch": switch, "load": self.load_id,
                         "purpose": "restoration" if position == grid.CLOSED else "sectionalizing"},
                    )
                    self.awaiting = None
                elif kernel.tick >= self.deadline:
                    kernel.milestone(sub, "restoration-action-timeout", {"switch": switch})
                    return GoalState.FAILED
                else:
                    return GoalState.EXECUTING
            if self.actions:
                switch, position = self.actions.pop(0)
                if not self.session.command_switch(sub, switch, position, "restoration"):
                    return GoalState.FAILED
                self.awaiting = (switch, position)
                self.deadline = kernel.tick + 2 * kernel.config.message_latency + 4
                return GoalState.EXECUTING
            self.phase = "verify"
            return GoalState.EXECUTING

        served, _ = kernel.energization()
        if served.get(self.load_id) == self.route.source:
            self.session.outcomes[self.load_id] = {
                "outcome": "restored", "source": self.route.source,
                "path": list(self.route.path), "route": self.index,
            }
            kernel.milestone(
                sub, "restoration-complete",
                {"load": self.load_id, "source": self.route.source},
            )
            return GoalState.PASSED
        return GoalState.FAILED


# ---------------------------------------------------------------------------
# Team construction and the session


@dataclass
class FlisrGoalModel:
    """The FLISR process model plus its goal-to-owner allocation map."""

    model: ProcessNode
    allocation: dict[str, str]


class FlisrSession:
    """Everything one FLISR episode needs: agents, teams, goal instance."""

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.topology = kernel.topology
        self.substation_id = "SubstationTeam"
        self.geometry = grid.normal_tree_paths(self.topology)
        self.agents: dict[str, SwitchAgent | ZoneAgent] = {}
        self.performers: dict[str, Performer] = {}
        self.feeder_of: dict[str, str | None] = {}
        self.feeder_name_by_source: dict[str, str] = {}
        self.switch_role_home: dict[str, tuple[str, str]] = {}  # switch -> (team key, role)
        self.task_teams: dict[str, TaskTeam] = {}
        self.teams: dict[str, Team] = {}
        self.outcomes: dict[str, dict[str, Any]] = {}
        self.granted: dict[str, tuple[str, dict]] = {}
        self.isolated_segments: list[str] = []
        self.known_failed: set[str] = set()
        self.instance: ProcessInstance | None = None
        self.goal_model: FlisrGoalModel | None = None
        self.broken = False
        self._reset_sent = False
        self._build()

    # -- construction ---------------------------------------------------

    def _build(self) -> None:
        topo = self.topology
        for i, src in enumerate(topo.sources, start=1):
            self.feeder_name_by_source[src.id] = f"Feeder{i}"

        for unit in topo.switches:
            feeders = {
                self.geometry[seg][0] for seg in unit.endpoints if seg in self.geometry
            }
            if unit.kind == grid.TIE or len(feeders) != 1:
                self.feeder_of[unit.id] = None
            else:
                self.feeder_of[unit.id] = self.feeder_name_by_source[feeders.pop()]

        session = self
        for unit in topo.switches:
            agent = SwitchAgent(
                unit.id, unit.id, session, trip_enabled=(unit.kind == grid.CB)
            )
            self.agents[unit.id] = agent
            self.kernel.register(unit.id, agent)
            self.performers[unit.id] = Performer(
                unit.id, frozenset({f"monitor:{unit.id}", f"operate:{unit.id}"})
            )
        for spare_id, covered in sorted(topo.spares.items()):
            agent = SwitchAgent(
                spare_id, covered, session,
                trip_enabled=(topo.switch_by_id[covered].kind == grid.CB),
            )
            self.agents[spare_id] = agent
            self.kernel.register(spare_id, agent)
            self.performers[spare_id] = Performer(
                spare_id, frozenset({f"monitor:{covered}", f"operate:{covered}"})
            )
        for src in topo.sources:
            zone = ZoneAgent(src, session)
            self.agents[src.id] = zone
            self.kernel.register(src.id, zone)
            self.performers[src.id] = Performer(src.id, frozenset({f"grant:{src.id}"}))

        # Feeder teams own their tree's switch agents (plus covering spares).
        feeder_members: dict[str, list[Performer | Team]] = {
            name: [] for name in self.feeder_name_by_source.values()
        }
        for unit in topo.switches:
            feeder = self.feeder_of[unit.id]
            if feeder is None:
                continue
            feeder_members[feeder].append(self.performers[unit.id])
            for spare_id, covered in sorted(topo.spares.items()):
                if covered == unit.id:
                    feeder_members[feeder].append(self.performers[spare_id])
        for src in topo.sources:
            name = self.feeder_name_by_source[src.id]
            self.teams[name] = Team(
                id=name,
                members=feeder_members[name],
                capabilities=frozenset({f"isolate:{name}"}),
            )
            self.kernel.register(name, None)

        sub_members: list[Performer | Team] = [
            self.teams[self.feeder_name_by_source[src.id]] for src in topo.sources
        ]
        sub_members += [self.performers[src.id] for src in topo.sources]
        for unit in topo.switches:
            if self.feeder_of[unit.id] is None:
                sub_members.append(self.performers[unit.id])
                for spare_id, covered in sorted(topo.spares.items()):
                    if covered == unit.id:
                        sub_members.append(self.performers[spare_id])
        self.substation = Team(id=self.substation_id, members=sub_members)
        self.teams[self.substation_id] = self.substation
        self.kernel.register(self.substation_id, None)

    def form_task_teams(self) -> None:
        """Bind every standing task team; raises UnfillableRole on breakers."""
        topo = self.topology
        for src in topo.sources:
            feeder = self.feeder_name_by_source[src.id]
            roles = []
            for unit in topo.switches:
                if self.feeder_of[unit.id] != feeder:
                    continue
                if unit.kind == grid.CB:
                    roles.append(Role(
                        f"breaker-agent:{unit.id}",
                        frozenset({f"monitor:{unit.id}", f"operate:{unit.id}"}),
                        min_count=1,
                    ))
                else:
                    roles.append(Role(
                        f"switch-agent:{unit.id}",
                        frozenset({f"monitor:{unit.id}", f"operate:{unit.id}"}),
                        min_count=0,
                    ))
            team = self.teams[feeder]
            task_team = form_task_team(team, roles)
            self.task_teams[feeder] = task_team
            for role in roles:
                switch = role.name.split(":", 1)[1]
                self.switch_role_home[switch] = (feeder, role.name)

        roles = []
        for src in topo.sources:
            feeder = self.feeder_name_by_source[src.id]
            roles.append(Role(f"isolator:{feeder}", frozenset({f"isolate:{feeder}"}), min_count=1))
        for src in topo.sources:
            roles.append(Role(f"granter:{src.id}", frozenset({f"grant:{src.id}"}), min_count=0))
        for unit in topo.switches:
            if self.feeder_of[unit.id] is None:
                roles.append(Role(
                    f"switch-agent:{unit.id}",
                    frozenset({f"monitor:{unit.id}", f"operate:{unit.id}"}),
                    min_count=0,
                ))
                self.switch_role_home[unit.id] = (self.substation_id, f"switch-agent:{unit.id}")
        self.task_teams[self.substation_id] = form_task_team(self.substation, roles)

    # -- lookups used by behaviors and agents ----------------------------

    def feeder_team_id(self, feeder: str) -> str:
        return feeder

    def feeder_ros_switches(self, feeder: str) -> list[str]:
        return [
            u.id for u in self.topology.switches
            if self.feeder_of[u.id] == feeder and u.kind != grid.CB
        ]

    def resolve_switch_actor(self, switch_id: str) -> str | None:
        home = self.switch_role_home.get(switch_id)
        if home is None:
            return None
        team_key, role_name = home
        performer = self.task_teams[team_key].performer_for(role_name)
        if performer is None or not self.kernel.is_alive(performer):
            return None
        return performer

    def fault_segment_loads(self) -> set[str]:
        segs = set(self.kernel.fault_segments())
        return {l.id for l in self.topology.loads if l.segment in segs}

    def needs_restoration(self, load_id: str) -> bool:
        load = self.topology.load_by_id[load_id]
        if load.segment in self.kernel.fault_segments():
            return False
        served, _ = self.kernel.energization()
        current = served.get(load_id)
        normal = self.geometry.get(load.segment, (None, []))[0]
        if current == normal and current is not None:
            return False
        if current is not None and self.granted.get(load_id, (None,))[0] == current:
            return False
        return True

    def command_switch(self, commander: str, switch: str, position: str, purpose: str) -> bool:
        performer = self.resolve_switch_actor(switch)
        if performer is None:
            self.kernel.milestone(
                commander, "command-unroutable", {"switch": switch, "position": position}
            )
            return False
        self.kernel.emit(
            "Command", commander, {"switch": switch, "position": position, "purpose": purpose}
        )
        self.kernel.send(
            commander, performer, "Command",
            {"switch": switch, "position": position, "purpose": purpose},
        )
        return True

    # -- goal model -------------------------------------------------------

    def build_goal_model(self) -> FlisrGoalModel:
        topo = self.topology
        allocation: dict[str, str] = {
            "flisr": self.substation_id,
            "fault-detection": self.substation_id,
            "fault-resolution": self.substation_id,
            "fault-restoration": self.substation_id,
            "fault-isolation": "feeder-teams",
        }
        monitors = []
        for unit in topo.switches:
            node_id = f"monitor:{unit.id}"
            monitors.append(task(node_id, MonitorBehavior(self, unit.id)))
            allocation[node_id] = unit.id

        attempts = []
        for n in (1, 2):
            attempts.append(sequence(
                f"isolation-attempt-{n}",
                [
                    task(f"query-detections-{n}", QueryDetectionsBehavior(self)),
                    task(f"locate-fault-{n}", LocateBehavior(self)),
                    task(f"isolate-segment-{n}", IsolateBehavior(self)),
                ],
                guard=_always,
            ))

        wrappers = []
        for load_id in restoration_order(topo):
            routes = grid.restoration_routes(topo, load_id)
            plans: list[ProcessNode] = [
                task(
                    f"restore-skip:{load_id}",
                    SkipRestorationBehavior(self, load_id),
                    guard=self._skip_guard(load_id),
                )
            ]
            for i, route in enumerate(routes, start=1):
                plans.append(task(
                    f"route:{load_id}:{i}",
                    RestoreRouteBehavior(self, load_id, route, i),
                    guard=self._route_guard(route),
                ))
            inner = choice(f"restore-goal:{load_id}", plans, guard=_always)
            wrappers.append(choice(
                f"restore:{load_id}",
                [
                    inner,
                    task(
                        f"restore-fallback:{load_id}",
                        MarkUnservedBehavior(self, load_id),
                        guard=_always,
                    ),
                ],
            ))
            allocation[f"restore-goal:{load_id}"] = self.substation_id

        model = sequence("flisr", [
            parallel("fault-detection", monitors),
            sequence("fault-resolution", [
                choice("fault-isolation", attempts),
                sequence("fault-restoration", wrappers),
            ]),
        ])
        return FlisrGoalModel(model=model, allocation=allocation)

    def _skip_guard(self, load_id: str):
        def guard(_ctx: DataContext) -> bool:
            return not self.needs_restoration(load_id)
        return guard

    def _route_guard(self, route: grid.RestorationRoute):
        def guard(_ctx: DataContext) -> bool:
            return all(
                self.resolve_switch_actor(sw) is not None for sw in route.path
            ) and self.kernel.is_alive(route.source)
        return guard

    # -- kernel session hooks ----------------------------------------------

    def on_run_start(self, kernel: Kernel) -> None:
        try:
            self.form_task_teams()
        except UnfillableRole as err:
            kernel.milestone(
                self.substation_id, "task-team-unfillable", {"role": err.role_name}
            )
            self.broken = True
            return
        for unit in self.topology.switches:
            kernel.send(self.substation_id, unit.id, "Reset", {})
        self.goal_model = self.build_goal_model()
        context = DataContext()
        self.substation.beliefs = context
        self.substation.models["flisr"] = self.goal_model.model
        self.instance = ProcessInstance(self.goal_model.model, context)
        kernel.executor.add(self.instance)
        kernel.milestone(
            self.substation_id, "flisr-armed",
            {"monitors": len(self.topology.switches)},
        )

    def pre_step(self, kernel: Kernel) -> None:
        # Latches are cleared by explicit reset once the episode completes.
        if self.is_terminal() and not self.broken and not self._reset_sent:
            self._reset_sent = True
            for unit in self.topology.switches:
                if kernel.is_alive(unit.id):
                    kernel.send(self.substation_id, unit.id, "Reset", {})
        newly_failed = [
            pid for pid, performer in sorted(self.performers.items())
            if not kernel.is_alive(pid) and pid not in self.known_failed
        ]
        for pid in newly_failed:
            self.known_failed.add(pid)
            self.performers[pid].fail()
            for team_key in sorted(self.task_teams):
                task_team = self.task_teams[team_key]
                if pid not in task_team.bound_ids():
                    continue
                before = {r: list(b) for r, b in task_team.bindings.items()}
                reform_task_team(task_team, pid)
                role = next(r for r, b in before.items() if pid in b)
                replacement = None
                after = task_team.bindings[role]
                gained = [x for x in after if x not in before[role]]
                if gained:
                    replacement = gained[0]
                kernel.milestone(
                    team_key, "task-team-reformed",
                    {"failed": pid, "role": role, "replacement": replacement,
                     "status": task_team.status},
                )

    def on_trip(self, kernel: Kernel, switch_id: str) -> None:
        if self.instance is None:
            return
        ctx = self.instance.context
        if ctx.get("trip") is not None:
            return
        feeder = self.feeder_of.get(switch_id)
        ctx.set("trip", {"switch": switch_id, "feeder": feeder, "tick": kernel.tick})
        kernel.milestone(
            self.substation_id, "breaker-tripped", {"switch": switch_id, "feeder": feeder}
        )

    def is_terminal(self) -> bool:
        if self.broken:
            return True
        if self.instance is None:
            return False
        return self.instance.is_terminal("flisr")

    # -- reporting ----------------------------------------------------------

    def finalize(self, kernel: Kernel, exit_status: str) -> dict:
        served, radial = kernel.energization()
        for load_id, outcome in self.outcomes.items():
            # A later adoption can pick a written-off load up incidentally;
            # report the source it actually ended on.
            if outcome.get("outcome") in ("unserved", "already-served"):
                outcome["source"] = served.get(load_id)
        ctx = self.instance.context if self.instance else DataContext()
        segment = ctx.get("fault_segment")
        milestones = [
            [e.t, e.detail["milestone"], {k: v for k, v in e.detail.items() if k != "milestone"}]
            for e in kernel.events
            if e.type == "Milestone"
        ]
        commitments = {}
        for src in self.topology.sources:
            zone = self.agents[src.id]
            assert isinstance(zone, ZoneAgent)
            commitments[src.id] = {
                "capacity_kw": src.capacity_kw,
                "served_kw": grid.served_demand(self.topology, kernel.states)[src.id],
                "outstanding_kw": zone.outstanding_kw(kernel),
            }
        goal_state = None
        if self.instance is not None:
            state = self.instance.state("flisr")
            goal_state = state.value if state else "Executing"
        fault_loads = self.fault_segment_loads()
        restorable_unserved = sorted(
            lid for lid, src_id in served.items()
            if src_id is None and lid not in fault_loads
        )
        return {
            "topology": self.topology.name,
            "scenario": kernel.scenario.name,
            "seed": kernel.scenario.seed,
            "exit_status": exit_status,
            "goal_state": goal_state if goal_state else ("Failed" if self.broken else "Executing"),
            "trip": ctx.get("trip"),
            "detection_snapshot": ctx.get("snapshot"),
            "fault_segment": None if segment is None else {
                "segment": segment.segment,
                "upstream": segment.upstream,
                "downstream": sorted(segment.downstream),
            },
            "isolation_actions": [
                {"switch": sw, "position": pos} for sw, pos in (isolate(segment) if segment else [])
            ],
            "restoration": {lid: self.outcomes.get(lid) for lid in sorted(self.outcomes)},
            "energization": {lid: served[lid] for lid in sorted(served)},
            "radial": radial,
            "sources": commitments,
            "restorable_unserved": restorable_unserved,
            "milestones": milestones,
        }


def build_session(kernel: Kernel) -> FlisrSession:
    session = FlisrSession(kernel)
    kernel.session = session
    return session


def run_flisr(kernel: Kernel) -> dict:
    """Execute the FLISR goal model over a prepared kernel; always reports."""
    session = kernel.session if isinstance(kernel.session, FlisrSession) else build_session(kernel)
    exit_status = kernel.run()
    return session.finalize(kernel, exit_status)

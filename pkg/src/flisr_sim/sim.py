"""Deterministic tick-quantized kernel: events, messages, fault injection.

One run is strictly single-threaded: each tick the kernel injects due faults
and agent failures, runs the reformation sweep, delivers due messages, applies
matured switch operations, samples every live protection pipeline, and gives
the executor one step. Every observable is an :class:`Event` totally ordered
by ``(t, seq)``; with a fixed topology, scenario and config the event log is
byte-identical across runs. The seed is carried in the log header for future
stochastic extensions; the default build draws no random numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from . import grid
from .bdi import Executor

EVENT_KINDS = (
    "Sample",
    "Trip",
    "Command",
    "PositionChanged",
    "MessageSend",
    "MessageDeliver",
    "FaultInjected",
    "AgentFailed",
    "Milestone",
)

MESSAGE_KINDS = ("Query", "Reply", "Command", "Ack", "Request", "Grant", "Deny", "Reset")

EXIT_COMPLETED = "completed"
EXIT_BUDGET = "budget-exhausted"
EXIT_INVARIANT = "invariant-violation"


class ScenarioError(Exception):
    """Scenario references ids that are not in the topology."""


@dataclass(frozen=True)
class Event:
    t: int
    seq: int
    type: str
    actor: str
    detail: dict[str, Any]

    def to_json(self) -> str:
        # Stable key order keeps determinism tests byte-exact.
        return json.dumps(
            {"t": self.t, "seq": self.seq, "type": self.type, "actor": self.actor, "detail": self.detail},
            separators=(", ", ": "),
        )

    def to_text(self) -> str:
        return f"t={self.t:05d} seq={self.seq:05d} {self.type:<15} {self.actor:<16} {json.dumps(self.detail, separators=(',', ':'))}"


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: str
    payload: dict[str, Any]
    sent: int
    deliver: int
    seq: int


@dataclass(frozen=True)
class FaultSpec:
    tick: int
    segment: str
    type: str = "Permanent"


@dataclass(frozen=True)
class AgentFailureSpec:
    tick: int
    agent: str


@dataclass
class Scenario:
    faults: list[FaultSpec] = field(default_factory=list)
    agent_failures: list[AgentFailureSpec] = field(default_factory=list)
    tick_budget: int = 200
    seed: int = 0
    name: str = "scenario"

    @classmethod
    def from_dict(cls, data: dict, name: str = "scenario") -> "Scenario":
        faults = [
            FaultSpec(int(f["tick"]), f["segment"], f.get("type", "Permanent"))
            for f in data.get("faults", [])
        ]
        failures = [
            AgentFailureSpec(int(a["tick"]), a["agent"])
            for a in data.get("agent_failures", [])
        ]
        return cls(
            faults=faults,
            agent_failures=failures,
            tick_budget=int(data.get("tick_budget", 200)),
            seed=int(data.get("seed", 0)),
            name=name,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), name=path.name)


@dataclass
class SimConfig:
    message_latency: int = 1
    fault_current_factor: float = 10.0
    load_current_factor: float = 0.5
    drain_ticks: int = 3  # extra ticks after the goal terminates, to flush messages

    def __post_init__(self) -> None:
        if self.message_latency < 1:
            raise ValueError("message latency must be >= 1 tick")


class Actor(Protocol):
    id: str
    alive: bool

    def handle_message(self, kernel: "Kernel", message: Message) -> None: ...


class Session(Protocol):
    """Coordination layer plugged into the kernel (the FLISR goal execution)."""

    def on_run_start(self, kernel: "Kernel") -> None: ...

    def pre_step(self, kernel: "Kernel") -> None: ...

    def on_trip(self, kernel: "Kernel", switch_id: str) -> None: ...

    def is_terminal(self) -> bool: ...

    def finalize(self, kernel: "Kernel", exit_status: str) -> dict: ...


class Kernel:
    """Owns the world state of one run: switch positions, clock, event log."""

    def __init__(
        self,
        topology: grid.Topology,
        scenario: Scenario,
        config: SimConfig | None = None,
    ):
        self.topology = topology
        self.scenario = scenario
        self.config = config or SimConfig()
        self.states = topology.normal_states()
        self.tick = 0
        self._seq = 0
        self._msg_seq = 0
        self.events: list[Event] = []
        self.actors: dict[str, Actor | None] = {}
        self.inboxes: dict[str, list[Message]] = {}
        self._in_flight: list[Message] = []
        self._due_positions: list[tuple[int, str, str, str]] = []  # (tick, switch, pos, cause)
        self.active_faults: list[FaultSpec] = []
        self._pending_faults = sorted(scenario.faults, key=lambda f: f.tick)
        self._pending_failures = sorted(scenario.agent_failures, key=lambda a: a.tick)
        self.executor = Executor()
        self.session: Session | None = None
        self.halted: str | None = None
        # The drain window must outlast message latency to flush final resets.
        self.config.drain_ticks = max(self.config.drain_ticks, self.config.message_latency + 2)

        for fault in scenario.faults:
            if fault.segment not in topology.segment_set:
                raise ScenarioError(f"fault references unknown segment {fault.segment!r}")
            if fault.type != "Permanent":
                raise ScenarioError(f"unsupported fault type {fault.type!r}")

    # -- registry -----------------------------------------------------

    def register(self, actor_id: str, actor: Actor | None) -> None:
        if actor_id in self.actors:
            raise ValueError(f"duplicate actor id {actor_id!r}")
        self.actors[actor_id] = actor
        self.inboxes[actor_id] = []

    def is_alive(self, actor_id: str) -> bool:
        actor = self.actors.get(actor_id)
        return actor is None or actor.alive

    def validate_scenario_refs(self) -> None:
        for failure in self.scenario.agent_failures:
            actor = self.actors.get(failure.agent)
            if actor is None:
                raise ScenarioError(f"agent-failure references unknown agent {failure.agent!r}")

    # -- events -------------------------------------------------------

    def emit(self, type_: str, actor: str, detail: dict[str, Any]) -> Event:
        assert type_ in EVENT_KINDS
        event = Event(self.tick, self._seq, type_, actor, detail)
        self._seq += 1
        self.events.append(event)
        return event

    def milestone(self, actor: str, name: str, detail: dict[str, Any]) -> Event:
        return self.emit("Milestone", actor, {"milestone": name, **detail})

    # -- messaging ----------------------------------------------------

    def send(
        self, src: str, dst: str, kind: str, payload: dict[str, Any]
    ) -> Message:
        assert kind in MESSAGE_KINDS
        if dst not in self.actors:
            raise ScenarioError(f"send to unknown agent {dst!r}")
        if src not in self.actors:
            raise ScenarioError(f"send from unknown agent {src!r}")
        message = Message(
            src=src,
            dst=dst,
            kind=kind,
            payload=payload,
            sent=self.tick,
            deliver=self.tick + self.config.message_latency,
            seq=self._msg_seq,
        )
        self._msg_seq += 1
        self._in_flight.append(message)
        self.emit(
            "MessageSend",
            src,
            {"dst": dst, "kind": kind, "deliver": message.deliver, "payload": payload},
        )
        return message

    def _deliver_due(self) -> None:
        due = [m for m in self._in_flight if m.deliver <= self.tick]
        self._in_flight = [m for m in self._in_flight if m.deliver > self.tick]
        # FIFO per channel: the global send sequence orders deliveries.
        for message in sorted(due, key=lambda m: (m.deliver, m.seq)):
            actor = self.actors.get(message.dst)
            if actor is not None and not actor.alive:
                self.emit(
                    "MessageDeliver",
                    message.dst,
                    {"src": message.src, "kind": message.kind, "dropped": True,
                     "reason": "DeliveryDropped: agent failed"},
                )
                continue
            self.emit(
                "MessageDeliver",
                message.dst,
                {"src": message.src, "kind": message.kind, "payload": message.payload},
            )
            if actor is not None:
                actor.handle_message(self, message)
            else:
                self.inboxes[message.dst].append(message)

    # -- switch operations ---------------------------------------------

    def schedule_position(self, switch_id: str, position: str, due: int, cause: str) -> None:
        if due <= self.tick:
            self._apply_position(switch_id, position, cause)
        else:
            self._due_positions.append((due, switch_id, position, cause))

    def _flush_due_positions(self) -> None:
        due = [p for p in self._due_positions if p[0] <= self.tick]
        self._due_positions = [p for p in self._due_positions if p[0] > self.tick]
        for _, switch_id, position, cause in due:
            self._apply_position(switch_id, position, cause)

    def _apply_position(self, switch_id: str, position: str, cause: str) -> None:
        self.states, record = grid.apply_action(self.topology, self.states, switch_id, position)
        if not record.changed:
            return
        self.emit(
            "PositionChanged",
            switch_id,
            {"position": position, "cause": cause, "radial": record.radial},
        )
        actor = self.actors.get(switch_id)
        if actor is not None and hasattr(actor, "device"):
            from .ied import apply_position

            apply_position(actor.device, self.tick, position)
        if not record.radial:
            self.milestone(
                "kernel",
                "invariant-violation",
                {"invariant": "radiality", "switch": switch_id, "position": position},
            )
            self.halted = EXIT_INVARIANT

    # -- physics ------------------------------------------------------

    def energization(self) -> tuple[dict[str, str | None], bool]:
        return grid.energization(self.topology, self.states)

    def fault_path_switches(self) -> set[str]:
        out: set[str] = set()
        for fault in self.active_faults:
            out.update(grid.fault_current_path(self.topology, self.states, fault.segment))
        return out

    def fault_segments(self) -> list[str]:
        return [f.segment for f in self.active_faults]

    def current_at(self, switch_id: str, threshold: float) -> float:
        """Fault current on the source-to-fault path, load current elsewhere."""
        if switch_id in self._tick_fault_switches:
            return threshold * self.config.fault_current_factor
        if self.states[switch_id] != grid.CLOSED:
            return 0.0
        unit = self.topology.switch_by_id[switch_id]
        if any(seg in self._tick_energized for seg in unit.endpoints):
            return threshold * self.config.load_current_factor
        return 0.0

    def _refresh_physics(self) -> None:
        self._tick_fault_switches = self.fault_path_switches()
        comp = grid._components(self.topology, self.states)
        energized = {comp[src.segment] for src in self.topology.sources}
        self._tick_energized = {
            seg for seg in self.topology.segments if comp[seg] in energized
        }

    # -- main loop ----------------------------------------------------

    def run(self) -> str:
        """Drive the run to FLISR termination, budget, or invariant halt."""
        assert self.session is not None, "kernel needs a session before run()"
        self.milestone(
            "kernel",
            "run-header",
            {
                "seed": self.scenario.seed,
                "latency": self.config.message_latency,
                "tick_budget": self.scenario.tick_budget,
                "topology": self.topology.name,
                "scenario": self.scenario.name,
            },
        )
        self.validate_scenario_refs()
        self.session.on_run_start(self)
        drain_left: int | None = None
        while self.tick < self.scenario.tick_budget and self.halted is None:
            self.tick += 1
            self._inject_due()
            self.session.pre_step(self)
            self._deliver_due()
            self._flush_due_positions()
            self._sample_all()
            if self.halted:
                break
            self.executor.step()
            if self.halted:
                break
            if self.session.is_terminal():
                if drain_left is None:
                    drain_left = self.config.drain_ticks
                elif drain_left > 0:
                    drain_left -= 1
                if drain_left == 0 or (not self._in_flight and not self._due_positions):
                    break
        if self.halted:
            return self.halted
        return EXIT_COMPLETED if self.session.is_terminal() else EXIT_BUDGET

    def _inject_due(self) -> None:
        while self._pending_faults and self._pending_faults[0].tick <= self.tick:
            fault = self._pending_faults.pop(0)
            self.active_faults.append(fault)
            self.emit(
                "FaultInjected",
                "kernel",
                {"segment": fault.segment, "type": fault.type},
            )
        while self._pending_failures and self._pending_failures[0].tick <= self.tick:
            failure = self._pending_failures.pop(0)
            actor = self.actors.get(failure.agent)
            if actor is not None and actor.alive:
                actor.alive = False
                self.emit("AgentFailed", failure.agent, {})

    def _sample_all(self) -> None:
        self._refresh_physics()
        sampled = []
        for unit in self.topology.switches:
            sampled.append(unit.id)
            actor = self.actors.get(unit.id)
            if actor is None or not actor.alive or not hasattr(actor, "sample"):
                continue
            actor.sample(self)
            if self.halted:
                return
        # Spare agents mirror their covered unit's current on their own device.
        for actor_id in sorted(self.actors):
            actor = self.actors[actor_id]
            if actor_id in sampled or actor is None or not actor.alive:
                continue
            if hasattr(actor, "sample"):
                actor.sample(self)
                if self.halted:
                    return


def write_events(
    events: list[Event], destination, fmt: str = "jsonl"
) -> None:
    for event in events:
        line = event.to_json() if fmt == "jsonl" else event.to_text()
        destination.write(line + "\n")


def run(
    topology: grid.Topology,
    scenario: Scenario,
    config: SimConfig | None = None,
) -> "RunResult":
    """Wire the standard FLISR agent architecture over a kernel and run it."""
    from .flisr import build_session

    kernel = Kernel(topology, scenario, config)
    session = build_session(kernel)
    exit_status = kernel.run()
    report = session.finalize(kernel, exit_status)
    return RunResult(events=kernel.events, report=report, exit_status=exit_status)


@dataclass
class RunResult:
    events: list[Event]
    report: dict
    exit_status: str

"""Executable goal/process-model engine with BDI plan-choice semantics.

A process model is a tree of control nodes (sequence, parallel, choice, loop)
over task leaves. Tasks carry a behavior object whose ``step`` is invoked one
slice at a time by an :class:`Executor`, so many goals progress concurrently
within a single thread. Choice nodes give BDI semantics: children are plans,
the applicable set is the guard-true children minus the plans that already
failed in the current attempt, and it is regenerated after every plan failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable


class GoalState(Enum):
    EXECUTING = "Executing"
    BLOCKED = "Blocked"
    PASSED = "Passed"
    FAILED = "Failed"
    STOPPED = "Stopped"


TERMINAL_STATES = frozenset({GoalState.PASSED, GoalState.FAILED, GoalState.STOPPED})


class NodeKind(Enum):
    TASK = "Task"
    SEQUENCE = "Sequence"
    PARALLEL = "Parallel"
    CHOICE = "Choice"
    LOOP = "Loop"


class ModelError(Exception):
    """Raised for malformed process models."""


class UnknownNodeError(KeyError):
    """Raised when a node id is not part of the instance's model."""


class DataContext:
    """Shared key/value bindings visible to every node of one execution."""

    def __init__(self, bindings: dict[str, Any] | None = None):
        self.bindings: dict[str, Any] = dict(bindings or {})

    def get(self, key: str, default: Any = None) -> Any:
        return self.bindings.get(key, default)

    def set(self, key: str, value: Any) -> None:
        self.bindings[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.bindings

    def record_error(self, node_id: str, error: Exception) -> None:
        self.bindings.setdefault("__errors__", []).append(
            {"node": node_id, "error": f"{type(error).__name__}: {error}"}
        )


Guard = Callable[[DataContext], bool]


class TaskBehavior:
    """One unit of goal-specific behaviour, advanced one slice per step.

    ``step`` returns the task's new state: EXECUTING to request another
    slice, BLOCKED to wait (``ready`` is polled each step without consuming a
    slice), or a terminal PASSED/FAILED.
    """

    def ready(self, ctx: DataContext) -> bool:
        return True

    def step(self, ctx: DataContext) -> GoalState:
        raise NotImplementedError

    def on_stopped(self, ctx: DataContext) -> None:
        """Hook invoked when the task is cancelled by a failing sibling."""


class FnBehavior(TaskBehavior):
    """Adapts a plain callable ``f(ctx) -> GoalState`` to a behavior."""

    def __init__(self, fn: Callable[[DataContext], GoalState]):
        self.fn = fn

    def step(self, ctx: DataContext) -> GoalState:
        return self.fn(ctx)


@dataclass
class ProcessNode:
    """A node of an executable goal model (task leaf or control node)."""

    id: str
    kind: NodeKind
    children: list["ProcessNode"] = field(default_factory=list)
    guard: Guard | None = None
    behavior: TaskBehavior | None = None

    def __post_init__(self) -> None:
        if self.kind is NodeKind.TASK:
            if self.children:
                raise ModelError(f"task node {self.id!r} must not have children")
            if self.behavior is None:
                raise ModelError(f"task node {self.id!r} needs a behavior")
        else:
            if not self.children:
                raise ModelError(f"{self.kind.value} node {self.id!r} needs >=1 child")
        if self.kind is NodeKind.CHOICE:
            for child in self.children:
                if child.guard is None:
                    raise ModelError(
                        f"choice {self.id!r}: plan {child.id!r} requires a guard"
                    )
        if self.kind is NodeKind.LOOP and self.guard is None:
            raise ModelError(f"loop node {self.id!r} requires a continuation guard")


def task(node_id: str, behavior: TaskBehavior | Callable, guard: Guard | None = None) -> ProcessNode:
    if not isinstance(behavior, TaskBehavior):
        behavior = FnBehavior(behavior)
    return ProcessNode(node_id, NodeKind.TASK, guard=guard, behavior=behavior)


def sequence(node_id: str, children: list[ProcessNode], guard: Guard | None = None) -> ProcessNode:
    return ProcessNode(node_id, NodeKind.SEQUENCE, children, guard=guard)


def parallel(node_id: str, children: list[ProcessNode], guard: Guard | None = None) -> ProcessNode:
    return ProcessNode(node_id, NodeKind.PARALLEL, children, guard=guard)


def choice(node_id: str, plans: list[ProcessNode], guard: Guard | None = None) -> ProcessNode:
    return ProcessNode(node_id, NodeKind.CHOICE, plans, guard=guard)


def loop(node_id: str, guard: Guard, children: list[ProcessNode]) -> ProcessNode:
    return ProcessNode(node_id, NodeKind.LOOP, children, guard=guard)


class ProcessInstance:
    """One execution of a process model over a shared data context."""

    def __init__(self, model: ProcessNode, context: DataContext | None = None):
        self.model = model
        self.context = context if context is not None else DataContext()
        self.nodes: dict[str, ProcessNode] = {}
        self.parents: dict[str, str | None] = {}
        self._index(model, None)
        # Current per-episode state; nodes appear once activated.
        self.statuses: dict[str, GoalState] = {}
        # Per-Choice bookkeeping for the current attempt.
        self.failed_plans: dict[str, set[str]] = {}
        self.active_plan: dict[str, str] = {}
        self.seq_cursor: dict[str, int] = {}
        self.loop_cursor: dict[str, int] = {}
        # FIFO of task node ids in activation order.
        self.task_fifo: list[str] = []
        # Instrumentation: every transition and every plan attempt, never cleared.
        self.trace: list[tuple[str, str, str]] = []
        self.attempt_log: list[tuple[str, str]] = []
        self.started = False

    def _index(self, node: ProcessNode, parent: str | None) -> None:
        if node.id in self.nodes:
            raise ModelError(f"duplicate node id {node.id!r} (model must be a tree)")
        self.nodes[node.id] = node
        self.parents[node.id] = parent
        for child in node.children:
            self._index(child, node.id)

    # -- state helpers ------------------------------------------------

    def state(self, node_id: str) -> GoalState | None:
        if node_id not in self.nodes:
            raise UnknownNodeError(node_id)
        return self.statuses.get(node_id)

    def is_terminal(self, node_id: str) -> bool:
        return self.statuses.get(node_id) in TERMINAL_STATES

    def _set_state(self, node_id: str, new: GoalState) -> None:
        old = self.statuses.get(node_id)
        if old in TERMINAL_STATES and new is not GoalState.EXECUTING:
            raise ModelError(f"node {node_id!r} is terminal ({old}), cannot move to {new}")
        self.statuses[node_id] = new
        self.trace.append((node_id, old.value if old else "-", new.value))

    # -- activation ---------------------------------------------------

    def start(self) -> None:
        if not self.started:
            self.started = True
            self._activate(self.model)

    def _activate(self, node: ProcessNode) -> None:
        """(Re-)activate a node, descending into the children it starts."""
        self._reset_subtree(node)
        self._set_state(node.id, GoalState.EXECUTING)
        if node.kind is NodeKind.TASK:
            self.task_fifo.append(node.id)
        elif node.kind is NodeKind.SEQUENCE:
            self.seq_cursor[node.id] = 0
            self._activate(node.children[0])
        elif node.kind is NodeKind.PARALLEL:
            for child in node.children:
                self._activate(child)
        elif node.kind is NodeKind.CHOICE:
            self.failed_plans[node.id] = set()
            self._start_next_plan(node)
        elif node.kind is NodeKind.LOOP:
            self.loop_cursor[node.id] = 0
            self._loop_iterate(node)

    def _reset_subtree(self, node: ProcessNode) -> None:
        """Clear episode state so a Loop/Choice can re-run a subtree."""
        for nid in self._subtree_ids(node):
            self.statuses.pop(nid, None)
            self.failed_plans.pop(nid, None)
            self.active_plan.pop(nid, None)
            self.seq_cursor.pop(nid, None)
            self.loop_cursor.pop(nid, None)
            if nid in self.task_fifo:
                self.task_fifo.remove(nid)

    def _subtree_ids(self, node: ProcessNode) -> list[str]:
        out = [node.id]
        for child in node.children:
            out.extend(self._subtree_ids(child))
        return out

    def _start_next_plan(self, node: ProcessNode) -> None:
        plans = self.applicable_plans(node.id)
        if not plans:
            # Empty applicable set is plan exhaustion, not an engine error.
            self._terminate(node, GoalState.FAILED)
            return
        chosen = plans[0]
        self.active_plan[node.id] = chosen
        self.attempt_log.append((node.id, chosen))
        self._activate(self.nodes[chosen])

    def _loop_iterate(self, node: ProcessNode) -> None:
        assert node.guard is not None
        if node.guard(self.context):
            self.loop_cursor[node.id] = 0
            self._activate(node.children[0])
        else:
            self._terminate(node, GoalState.PASSED)

    def _terminate(self, node: ProcessNode, state: GoalState) -> None:
        self._set_state(node.id, state)
        if node.kind is NodeKind.CHOICE:
            # Exclusions are scoped to one attempt of the Choice node.
            self.failed_plans[node.id] = set()
            self.active_plan.pop(node.id, None)

    def _stop_subtree(self, node: ProcessNode) -> None:
        for nid in self._subtree_ids(node):
            if self.statuses.get(nid) in (GoalState.EXECUTING, GoalState.BLOCKED):
                sub = self.nodes[nid]
                self._set_state(nid, GoalState.STOPPED)
                if sub.kind is NodeKind.CHOICE:
                    self.failed_plans[nid] = set()
                if nid in self.task_fifo:
                    self.task_fifo.remove(nid)
                if sub.kind is NodeKind.TASK and sub.behavior is not None:
                    sub.behavior.on_stopped(self.context)

    # -- BDI plan selection -------------------------------------------

    def applicable_plans(self, choice_id: str) -> list[str]:
        """Guard-true plans in declaration order, minus this attempt's failures."""
        node = self.nodes.get(choice_id)
        if node is None:
            raise UnknownNodeError(choice_id)
        if node.kind is not NodeKind.CHOICE:
            raise ModelError(f"node {choice_id!r} is {node.kind.value}, not Choice")
        failed = self.failed_plans.get(choice_id, set())
        out = []
        for child in node.children:
            if child.id in failed:
                continue
            assert child.guard is not None
            if child.guard(self.context):
                out.append(child.id)
        return out

    # -- slice execution ----------------------------------------------

    def run_slices(self) -> int:
        """One time slice: step every executing task once, then resolve."""
        invoked = 0
        for task_id in list(self.task_fifo):
            state = self.statuses.get(task_id)
            node = self.nodes[task_id]
            assert node.behavior is not None
            if state is GoalState.BLOCKED:
                # Blocked tasks are polled for readiness without consuming a slice.
                if not node.behavior.ready(self.context):
                    continue
                self._set_state(task_id, GoalState.EXECUTING)
                state = GoalState.EXECUTING
            if state is not GoalState.EXECUTING:
                continue
            try:
                result = node.behavior.step(self.context)
            except Exception as err:  # behavior errors fail the task, not the engine
                self.context.record_error(task_id, err)
                result = GoalState.FAILED
            invoked += 1
            if result is not GoalState.EXECUTING:
                self._set_state(task_id, result)
                if result in TERMINAL_STATES:
                    self.task_fifo.remove(task_id)
        self._resolve()
        return invoked

    def _resolve(self) -> None:
        """Propagate child outcomes through control nodes to a fixpoint."""
        changed = True
        while changed:
            changed = False
            for nid in self._control_ids_bottom_up():
                if self.statuses.get(nid) is not GoalState.EXECUTING:
                    continue
                if self._resolve_one(self.nodes[nid]):
                    changed = True

    def _control_ids_bottom_up(self) -> list[str]:
        order: list[str] = []

        def visit(node: ProcessNode) -> None:
            for child in node.children:
                visit(child)
            if node.kind is not NodeKind.TASK:
                order.append(node.id)

        visit(self.model)
        return order

    def _resolve_one(self, node: ProcessNode) -> bool:
        if node.kind is NodeKind.SEQUENCE:
            idx = self.seq_cursor[node.id]
            child = node.children[idx]
            state = self.statuses.get(child.id)
            if state is GoalState.PASSED:
                if idx + 1 < len(node.children):
                    self.seq_cursor[node.id] = idx + 1
                    self._activate(node.children[idx + 1])
                else:
                    self._terminate(node, GoalState.PASSED)
                return True
            if state in (GoalState.FAILED, GoalState.STOPPED):
                self._terminate(node, GoalState.FAILED)
                return True
            return False

        if node.kind is NodeKind.PARALLEL:
            states = [self.statuses.get(c.id) for c in node.children]
            if any(s in (GoalState.FAILED, GoalState.STOPPED) for s in states):
                # Fail fast: cancel the still-running siblings.
                for child in node.children:
                    if self.statuses.get(child.id) not in TERMINAL_STATES:
                        self._stop_subtree(child)
                self._terminate(node, GoalState.FAILED)
                return True
            if all(s is GoalState.PASSED for s in states):
                self._terminate(node, GoalState.PASSED)
                return True
            return False

        if node.kind is NodeKind.CHOICE:
            active = self.active_plan.get(node.id)
            if active is None:
                return False
            state = self.statuses.get(active)
            if state is GoalState.PASSED:
                self._terminate(node, GoalState.PASSED)
                return True
            if state in (GoalState.FAILED, GoalState.STOPPED):
                self.failed_plans[node.id].add(active)
                self._start_next_plan(node)
                return True
            return False

        if node.kind is NodeKind.LOOP:
            idx = self.loop_cursor[node.id]
            child = node.children[idx]
            state = self.statuses.get(child.id)
            if state is GoalState.PASSED:
                if idx + 1 < len(node.children):
                    self.loop_cursor[node.id] = idx + 1
                    self._activate(node.children[idx + 1])
                else:
                    self._loop_iterate(node)
                return True
            if state in (GoalState.FAILED, GoalState.STOPPED):
                self._terminate(node, GoalState.FAILED)
                return True
            return False

        return False


class Executor:
    """Time-sliced executor owning a set of process instances.

    Single-threaded: one executor owns its instances exclusively. Instances
    are progressed in the order they were added; within an instance, task
    behaviors run in FIFO activation order.
    """

    def __init__(self) -> None:
        self.instances: list[ProcessInstance] = []

    def add(self, instance: ProcessInstance) -> ProcessInstance:
        instance.start()
        self.instances.append(instance)
        return instance

    def step(self) -> int:
        """Give every executing task one slice; returns behavior invocations."""
        return sum(instance.run_slices() for instance in self.instances)

    def run_to_completion(self, max_steps: int = 10_000) -> int:
        steps = 0
        while steps < max_steps and any(
            not inst.is_terminal(inst.model.id) for inst in self.instances
        ):
            self.step()
            steps += 1
        return steps


def execute_node(instance: ProcessInstance, node_id: str, max_steps: int = 10_000) -> GoalState:
    """Drive one node (and its subtree) to a terminal state synchronously."""
    node = instance.nodes.get(node_id)
    if node is None:
        raise UnknownNodeError(node_id)
    if instance.is_terminal(node_id):
        raise ModelError(f"node {node_id!r} already terminal")
    if instance.statuses.get(node_id) is None:
        if node is instance.model:
            instance.start()
        else:
            instance.started = True
            instance._activate(node)
    for _ in range(max_steps):
        if instance.is_terminal(node_id):
            break
        instance.run_slices()
    state = instance.statuses.get(node_id)
    assert state is not None
    return state

"""Hierarchical teams, roles as goal collections, and task-team formation.

A team is a holonic structure: its members are individual performers or
sub-teams, and it carries its own beliefs and goal models. A task team binds
role instances to capable members; it can be formed before or during process
execution and reformed automatically when a bound member fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bdi import DataContext, ProcessNode


class UnfillableRole(Exception):
    """A mandatory role cannot be filled from the team's members."""

    def __init__(self, role_name: str, filled: int, needed: int):
        self.role_name = role_name
        super().__init__(
            f"role {role_name!r} needs {needed} filler(s), found {filled}"
        )


class NotBound(Exception):
    """The performer named in a reformation is not bound in the task team."""


@dataclass
class Performer:
    """An individual agent: a capability set plus a liveness flag."""

    id: str
    capabilities: frozenset[str]
    alive: bool = True

    def fail(self) -> None:
        self.alive = False

    @property
    def is_alive(self) -> bool:
        return self.alive


@dataclass
class Team:
    """A team of performers and/or sub-teams with its own beliefs and models.

    A team can itself fill a role in a higher team (the holonic duality); its
    capability set is declared explicitly and it counts as alive while any
    member is.
    """

    id: str
    members: list["Performer | Team"] = field(default_factory=list)
    beliefs: DataContext = field(default_factory=DataContext)
    models: dict[str, ProcessNode] = field(default_factory=dict)
    capabilities: frozenset[str] = frozenset()

    @property
    def is_alive(self) -> bool:
        return any(m.is_alive for m in self.members)

    def member_ids(self) -> list[str]:
        return [m.id for m in self.members]


@dataclass(frozen=True)
class Role:
    """A named collection of related goals with a filler multiplicity."""

    name: str
    goals: frozenset[str]
    min_count: int = 1
    max_count: int = 1

    def __post_init__(self) -> None:
        if not self.goals:
            raise ValueError(f"role {self.name!r} needs a non-empty goal set")
        if self.min_count < 0 or self.min_count > self.max_count:
            raise ValueError(
                f"role {self.name!r}: need 0 <= min ({self.min_count}) <= max ({self.max_count})"
            )


class TaskTeamStatus:
    FULL = "Full"
    DEGRADED = "Degraded"
    BROKEN = "Broken"


@dataclass
class TaskTeam:
    """Role instances bound to performers, drawn from one parent team."""

    parent_team: Team
    roles: list[Role]
    bindings: dict[str, list[str]]  # role name -> bound performer ids, in binding order
    status: str = TaskTeamStatus.FULL

    def performer_for(self, role_name: str) -> str | None:
        """First filler of a role, or None when the binding was degraded away."""
        bound = self.bindings.get(role_name, [])
        return bound[0] if bound else None

    def bound_ids(self) -> set[str]:
        return {pid for bound in self.bindings.values() for pid in bound}

    def role_by_name(self, role_name: str) -> Role:
        for role in self.roles:
            if role.name == role_name:
                return role
        raise KeyError(role_name)


def _capable(member: "Performer | Team", role: Role) -> bool:
    return member.capabilities >= role.goals


def form_task_team(team: Team, roles: list[Role]) -> TaskTeam:
    """Bind each role to the first capable alive members, in declaration order.

    A performer fills at most one role instance per task team. Raises
    UnfillableRole when some role cannot reach its minimum multiplicity.
    """
    bindings: dict[str, list[str]] = {}
    taken: set[str] = set()
    for role in roles:
        fillers: list[str] = []
        for member in team.members:
            if len(fillers) >= role.max_count:
                break
            if member.id in taken or not member.is_alive:
                continue
            if _capable(member, role):
                fillers.append(member.id)
                taken.add(member.id)
        if len(fillers) < role.min_count:
            raise UnfillableRole(role.name, len(fillers), role.min_count)
        bindings[role.name] = fillers
    return TaskTeam(parent_team=team, roles=list(roles), bindings=bindings)


def reform_task_team(task_team: TaskTeam, failed_id: str) -> TaskTeam:
    """Rebind a failed member's role instance, degrade, or break the team.

    Mutates the task team in place and returns it. Non-failed bindings are
    never touched. Preference order: a capable unbound alive member keeps the
    team Full; otherwise the binding is dropped and the team is Degraded if
    the role still meets its minimum multiplicity, Broken if not.
    """
    role_name = None
    for name, bound in task_team.bindings.items():
        if failed_id in bound:
            role_name = name
            break
    if role_name is None:
        raise NotBound(failed_id)
    role = task_team.role_by_name(role_name)
    bound = task_team.bindings[role_name]
    taken = task_team.bound_ids()
    for member in task_team.parent_team.members:
        if member.id in taken or not member.is_alive:
            continue
        if _capable(member, role):
            bound[bound.index(failed_id)] = member.id
            return task_team
    bound.remove(failed_id)
    if len(bound) >= role.min_count:
        if task_team.status != TaskTeamStatus.BROKEN:
            task_team.status = TaskTeamStatus.DEGRADED
    else:
        task_team.status = TaskTeamStatus.BROKEN
    return task_team

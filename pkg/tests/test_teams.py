"""Task-team formation and automatic reformation."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flisr_sim.teams import (
    NotBound,
    Performer,
    Role,
    TaskTeamStatus,
    Team,
    UnfillableRole,
    form_task_team,
    reform_task_team,
)


def feeder1_team():
    return Team(
        id="Feeder1",
        members=[
            Performer("CB1", frozenset({"monitor-breaker"})),
            Performer("ROS11", frozenset({"monitor-switch"})),
            Performer("ROS12", frozenset({"monitor-switch"})),
        ],
    )


def feeder1_roles():
    return [
        Role("breaker-monitor", frozenset({"monitor-breaker"}), min_count=1, max_count=1),
        Role("switch-monitor", frozenset({"monitor-switch"}), min_count=2, max_count=2),
    ]


def test_formation_fills_roles_in_member_order():
    task_team = form_task_team(feeder1_team(), feeder1_roles())
    assert task_team.bindings == {
        "breaker-monitor": ["CB1"],
        "switch-monitor": ["ROS11", "ROS12"],
    }
    assert task_team.status == TaskTeamStatus.FULL


def test_formation_unfillable_role_names_it():
    team = feeder1_team()
    with pytest.raises(UnfillableRole) as exc:
        form_task_team(team, [Role("pilot", frozenset({"fly"}))])
    assert exc.value.role_name == "pilot"


def test_formation_first_capable_wins_tie():
    team = Team(
        id="T",
        members=[
            Performer("A", frozenset({"g"})),
            Performer("B", frozenset({"g"})),
        ],
    )
    task_team = form_task_team(team, [Role("r", frozenset({"g"}))])
    assert task_team.bindings["r"] == ["A"]


def test_formation_skips_dead_members():
    team = feeder1_team()
    team.members[1].fail()  # ROS11
    task_team = form_task_team(
        team, [Role("switch-monitor", frozenset({"monitor-switch"}), 1, 2)]
    )
    assert task_team.bindings["switch-monitor"] == ["ROS12"]


def test_one_role_instance_per_performer():
    team = Team(id="T", members=[Performer("A", frozenset({"g", "h"}))])
    with pytest.raises(UnfillableRole):
        form_task_team(team, [Role("r1", frozenset({"g"})), Role("r2", frozenset({"h"}))])


def test_reformation_rebinds_to_spare():
    team = Team(
        id="Feeder3",
        members=[
            Performer("ROS31", frozenset({"monitor-switch"})),
            Performer("ROS32", frozenset({"monitor-switch"})),
        ],
    )
    task_team = form_task_team(team, [Role("switch-monitor", frozenset({"monitor-switch"}), 1, 1)])
    assert task_team.bindings["switch-monitor"] == ["ROS31"]
    team.members[0].fail()
    reform_task_team(task_team, "ROS31")
    assert task_team.bindings["switch-monitor"] == ["ROS32"]
    assert task_team.status == TaskTeamStatus.FULL


def test_reformation_degrades_when_min_still_met():
    team = feeder1_team()
    task_team = form_task_team(
        team, [Role("switch-monitor", frozenset({"monitor-switch"}), min_count=1, max_count=2)]
    )
    assert task_team.bindings["switch-monitor"] == ["ROS11", "ROS12"]
    team.members[2].fail()  # ROS12, no spare available
    reform_task_team(task_team, "ROS12")
    assert task_team.bindings["switch-monitor"] == ["ROS11"]
    assert task_team.status == TaskTeamStatus.DEGRADED


def test_reformation_breaks_when_sole_filler_lost():
    team = Team(id="T", members=[Performer("A", frozenset({"g"}))])
    task_team = form_task_team(team, [Role("r", frozenset({"g"}), 1, 1)])
    team.members[0].fail()
    reform_task_team(task_team, "A")
    assert task_team.status == TaskTeamStatus.BROKEN
    assert task_team.bindings["r"] == []


def test_reformation_unknown_performer():
    task_team = form_task_team(feeder1_team(), feeder1_roles())
    with pytest.raises(NotBound):
        reform_task_team(task_team, "ghost")


def test_reformation_never_touches_other_bindings():
    team = feeder1_team()
    team.members.append(Performer("ROS13", frozenset({"monitor-switch"})))
    task_team = form_task_team(team, feeder1_roles())
    before_breaker = list(task_team.bindings["breaker-monitor"])
    team.members[1].fail()  # ROS11
    reform_task_team(task_team, "ROS11")
    assert task_team.bindings["breaker-monitor"] == before_breaker
    assert task_team.bindings["switch-monitor"] == ["ROS13", "ROS12"]


def test_team_capability_and_liveness():
    sub = Team(id="Sub", members=[Performer("A", frozenset({"g"}))],
               capabilities=frozenset({"isolate"}))
    top = Team(id="Top", members=[sub])
    task_team = form_task_team(top, [Role("isolator", frozenset({"isolate"}))])
    assert task_team.bindings["isolator"] == ["Sub"]
    sub.members[0].fail()
    assert not sub.is_alive


# ---------------------------------------------------------------------------
# Properties


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**9))
def test_formation_capability_soundness_and_determinism(seed):
    rng = random.Random(seed)
    goals = [f"g{i}" for i in range(rng.randint(1, 5))]
    members = [
        Performer(
            f"m{i}",
            frozenset(rng.sample(goals, rng.randint(0, len(goals)))),
            alive=rng.random() > 0.2,
        )
        for i in range(rng.randint(1, 8))
    ]
    roles = []
    for i in range(rng.randint(1, 4)):
        geta = frozenset(rng.sample(goals, rng.randint(1, len(goals))))
        mx = rng.randint(1, 3)
        roles.append(Role(f"r{i}", geta, min_count=rng.randint(0, mx), max_count=mx))

    def build():
        team = Team(
            id="T",
            members=[Performer(m.id, m.capabilities, m.alive) for m in members],
        )
        try:
            return form_task_team(team, roles), team
        except UnfillableRole:
            return None, team

    first, team1 = build()
    second, _ = build()
    if first is None:
        assert second is None
        return
    assert second is not None and second.bindings == first.bindings  # determinism
    by_id = {m.id: m for m in team1.members}
    seen: set[str] = set()
    for role in roles:
        for pid in first.bindings[role.name]:
            assert by_id[pid].capabilities >= role.goals  # capability soundness
            assert by_id[pid].is_alive
            assert pid not in seen  # one role instance per performer
            seen.add(pid)
        assert role.min_count <= len(first.bindings[role.name]) <= role.max_count


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**9))
def test_reformation_keeps_capability_soundness(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 8)
    members = [Performer(f"m{i}", frozenset({"g"})) for i in range(n)]
    team = Team(id="T", members=list(members))
    mx = rng.randint(1, n)
    role = Role("r", frozenset({"g"}), min_count=rng.randint(0, mx), max_count=mx)
    task_team = form_task_team(team, [role])
    for _ in range(rng.randint(1, n)):
        bound = task_team.bindings["r"]
        if not bound:
            break
        victim = rng.choice(bound)
        by_id = {m.id: m for m in members}
        by_id[victim].fail()
        others = {r: list(b) for r, b in task_team.bindings.items() if victim not in b}
        reform_task_team(task_team, victim)
        for pid in task_team.bindings["r"]:
            assert by_id[pid].is_alive
            assert by_id[pid].capabilities >= role.goals
        for r, b in others.items():
            assert task_team.bindings[r] == b  # stability
        if task_team.status == TaskTeamStatus.BROKEN:
            break

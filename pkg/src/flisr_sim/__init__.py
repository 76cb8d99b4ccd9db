"""Agent-team FLISR simulator for radial power-distribution utilities."""

from .bdi import (
    DataContext,
    Executor,
    GoalState,
    NodeKind,
    ProcessInstance,
    ProcessNode,
    TaskBehavior,
    execute_node,
)
from .grid import Topology, energization, locate_segment, restoration_routes
from .sim import Kernel, Scenario, SimConfig, run
from .teams import Performer, Role, TaskTeam, Team, form_task_team, reform_task_team

__version__ = "0.1.0"

__all__ = [
    "DataContext",
    "Executor",
    "GoalState",
    "Kernel",
    "NodeKind",
    "Performer",
    "ProcessInstance",
    "ProcessNode",
    "Role",
    "Scenario",
    "SimConfig",
    "TaskBehavior",
    "TaskTeam",
    "Team",
    "Topology",
    "energization",
    "execute_node",
    "form_task_team",
    "locate_segment",
    "reform_task_team",
    "restoration_routes",
    "run",
    "__version__",
]

"""Planar two-arm kinematic simulator with scripted experts."""

from .kinematics import ArmState, fk, ik, link_points
from .render import CAMERAS, camera_window, render, render_all
from .tasks import TASKS, TaskSpec, generate_demos, get_task, scripted_expert, success
from .world import Bar, SimConfig, SimulationFault, WorldObject, WorldState, step

__all__ = [
    "ArmState", "Bar", "CAMERAS", "SimConfig", "SimulationFault", "TASKS", "TaskSpec",
    "WorldObject", "WorldState", "camera_window", "fk", "generate_demos", "get_task", "ik",
    "link_points", "render", "render_all", "scripted_expert", "step", "success",
]

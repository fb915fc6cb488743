"""Kinematic two-arm world: rate-limited joint tracking, grasping, a carried box and a two-handed bar."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kinematics import ArmState, fk

SIDES = ("left", "right")


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    workspace: tuple[float, float] = (1.0, 0.6)
    links: tuple[float, float, float] = (0.15, 0.12, 0.10)
    base_left: tuple[float, float] = (0.2, 0.0)
    base_right: tuple[float, float] = (0.8, 0.0)
    grasp_radius: float = 0.03
    max_joint_step: float = 0.05  # rad per step
    max_gripper_step: float = 0.25
    rate_hz: int = 50
    box_half_size: float = 0.02
    box_rest_y: float = 0.02
    bar_length: float = 0.2
    bar_rest_y: float = 0.04
    bar_slip: float = 0.04  # tolerated change in hand separation before the bar slips
    image_size: int = 48
    wrist_window: float = 0.32


@dataclass
class WorldObject:
    position: np.ndarray
    held_by: str = "none"  # none | left | right | both

    def copy(self) -> "WorldObject":
        return WorldObject(self.position.copy(), self.held_by)


@dataclass
class Bar:
    center: np.ndarray
    tilt: float = 0.0  # positive when the left end is higher
    held_by: str = "none"
    length: float = 0.2

    def copy(self) -> "Bar":
        return Bar(self.center.copy(), self.tilt, self.held_by, self.length)

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.length * np.array([math.cos(self.tilt), -math.sin(self.tilt)])
        return self.center - half, self.center + half


@dataclass
class WorldState:
    left: ArmState
    right: ArmState
    objects: list[WorldObject] = field(default_factory=list)
    bar: Bar | None = None
    t: int = 0
    config: SimConfig = field(default_factory=SimConfig)

    def arm(self, side: str) -> ArmState:
        return self.left if side == "left" else self.right

    def ee(self, side: str) -> np.ndarray:
        x, y, _ = fk(self.arm(side))
        return np.array([x, y])

    def copy(self) -> "WorldState":
        return WorldState(
            self.left.copy(), self.right.copy(), [o.copy() for o in self.objects],
            self.bar.copy() if self.bar is not None else None, self.t, self.config,
        )

    def joint_vector(self) -> np.ndarray:
        return np.concatenate([self.left.joint_vector(), self.right.joint_vector()])


def _move_arm(arm: ArmState, action: np.ndarray, cfg: SimConfig) -> ArmState:
    dq = np.clip(action[:3] - arm.angles, -cfg.max_joint_step, cfg.max_joint_step)
    target_grip = min(max(float(action[3]), 0.0), 1.0)
    dg = min(max(target_grip - arm.gripper, -cfg.max_gripper_step), cfg.max_gripper_step)
    return ArmState(arm.angles + dq, arm.gripper + dg, arm.base, arm.links)


def _other(side: str) -> str:
    return "right" if side == "left" else "left"


def _add_holder(held_by: str, side: str) -> str:
    if held_by == "none":
        return side
    if held_by == _other(side):
        return "both"
    return held_by


def _drop_holder(held_by: str, side: str) -> str:
    if held_by == "both":
        return _other(side)
    if held_by == side:
        return "none"
    return held_by


def _holds(held_by: str, side: str) -> bool:
    return held_by == side or held_by == "both"


def _update_box(obj: WorldObject, ee: dict[str, np.ndarray], grip: dict[str, float], cfg: SimConfig) -> WorldObject:
    held = obj.held_by
    for side in SIDES:
        if _holds(held, side) and grip[side] > 0.5:
            held = _drop_holder(held, side)
        elif not _holds(held, side) and grip[side] < 0.5 and np.linalg.norm(ee[side] - obj.position) <= cfg.grasp_radius:
            held = _add_holder(held, side)
    if held == "both":
        pos = 0.5 * (ee["left"] + ee["right"])
    elif held in SIDES:
        pos = ee[held].copy()
    else:
        pos = np.array([obj.position[0], cfg.box_rest_y])
    return WorldObject(pos, held)


def _update_bar(bar: Bar, ee: dict[str, np.ndarray], grip: dict[str, float], cfg: SimConfig) -> Bar:
    ends = dict(zip(SIDES, bar.endpoints()))
    held = bar.held_by
    released = False
    for side in SIDES:
        if _holds(held, side) and grip[side] > 0.5:
            held = _drop_holder(held, side)
            released = True
        elif not _holds(held, side) and grip[side] < 0.5 and np.linalg.norm(ee[side] - ends[side]) <= cfg.grasp_radius:
            held = _add_holder(held, side)

    if held == "both" and not released:
        sep = ee["right"] - ee["left"]
        if abs(float(np.hypot(*sep)) - bar.length) > cfg.bar_slip:
            return Bar(np.array([bar.center[0], cfg.bar_rest_y]), 0.0, "none", bar.length)
        tilt = math.atan2(ee["left"][1] - ee["right"][1], ee["right"][0] - ee["left"][0])
        return Bar(0.5 * (ee["left"] + ee["right"]), tilt, "both", bar.length)

    # one hand cannot carry the bar: it rests on its supports
    rest = Bar(np.array([bar.center[0], cfg.bar_rest_y]), 0.0, held, bar.length)
    rest_ends = dict(zip(SIDES, rest.endpoints()))
    for side in SIDES:
        if _holds(rest.held_by, side) and np.linalg.norm(ee[side] - rest_ends[side]) > cfg.grasp_radius:
            rest.held_by = _drop_holder(rest.held_by, side)
    return rest


def step(world: WorldState, action_left, action_right) -> WorldState:
    """Advance one tick towards absolute joint targets ``[q1, q2, q3, gripper]`` per arm."""
    cfg = world.config
    action_left = np.asarray(action_left, dtype=np.float64)
    action_right = np.asarray(action_right, dtype=np.float64)
    if not (np.all(np.isfinite(action_left)) and np.all(np.isfinite(action_right))):
        raise SimulationFault(f"non-finite action at t={world.t}")
    left = _move_arm(world.left, action_left, cfg)
    right = _move_arm(world.right, action_right, cfg)
    nxt = WorldState(left, right, [], None, world.t + 1, cfg)
    ee = {side: nxt.ee(side) for side in SIDES}
    grip = {"left": left.gripper, "right": right.gripper}
    nxt.objects = [_update_box(o, ee, grip, cfg) for o in world.objects]
    if world.bar is not None:
        nxt.bar = _update_bar(world.bar, ee, grip, cfg)
    return nxt


def with_config(world: WorldState, **changes) -> WorldState:
    out = world.copy()
    out.config = replace(world.config, **changes)
    return out

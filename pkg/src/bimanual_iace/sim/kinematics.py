"""Planar three-link arm kinematics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class ArmState:
    angles: np.ndarray  # three revolute joints, each relative to the previous link
    gripper: float  # 1 = open, 0 = closed
    base: np.ndarray
    links: tuple[float, float, float] = (0.15, 0.12, 0.10)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.base = np.asarray(self.base, dtype=np.float64)
        self.gripper = float(self.gripper)

    def copy(self) -> "ArmState":
        return ArmState(self.angles.copy(), self.gripper, self.base.copy(), self.links)

    def joint_vector(self) -> np.ndarray:
        """``[q1, q2, q3, gripper]`` as the policy sees it."""
        return np.append(self.angles, self.gripper)


def link_points(arm: ArmState) -> np.ndarray:
    """Base, elbow, wrist and end-effector positions, shape (4, 2)."""
    pts = np.empty((4, 2))
    pts[0] = arm.base
    heading = 0.0
    for i, (q, length) in enumerate(zip(arm.angles, arm.links)):
        heading += q
        pts[i + 1] = pts[i] + length * np.array([math.cos(heading), math.sin(heading)])
    return pts


def fk(arm: ArmState) -> tuple[float, float, float]:
    """End-effector ``(x, y, orientation)``; orientation wrapped to [-pi, pi)."""
    x, y = link_points(arm)[-1]
    return float(x), float(y), float(wrap_angle(np.sum(arm.angles)))


class Unreachable(ValueError):
    pass


def ik(target, base, links=(0.15, 0.12, 0.10), elbow: int = 1, orientation: float | None = None) -> np.ndarray:
    """Joint angles placing the end-effector at ``target``.

    The last link points along ``orientation``; by default it points radially
    away from the base, which keeps the solution continuous over the inner
    half-plane. ``elbow`` is the sign of the second joint.
    """
    target = np.asarray(target, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    l1, l2, l3 = links
    rel = target - base
    if orientation is None:
        orientation = math.atan2(rel[1], rel[0])
    wrist = rel - l3 * np.array([math.cos(orientation), math.sin(orientation)])
    r2 = float(wrist @ wrist)
    c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise Unreachable(f"target {target} out of reach from base {base}")
    q2 = elbow * math.acos(c2)
    q1 = math.atan2(wrist[1], wrist[0]) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    q3 = orientation - q1 - q2
    return wrap_angle(np.array([q1, q2, q3]))

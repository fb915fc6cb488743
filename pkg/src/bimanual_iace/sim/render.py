"""Point-sampled rasterizer for the four cameras.

Every primitive is tested against pixel centres only, so content lying
entirely outside a camera's window can never change that camera's image.
"""

from __future__ import annotations

import numpy as np

from .kinematics import link_points
from .world import WorldState

CAMERAS = ("wrist_left", "wrist_right", "top", "front")

BACKGROUND = np.array([0.1, 0.1, 0.1])
ARM_COLORS = {"left": np.array([0.9, 0.25, 0.2]), "right": np.array([0.2, 0.35, 0.9])}
BOX_COLOR = np.array([0.2, 0.85, 0.3])
BAR_COLOR = np.array([0.95, 0.85, 0.2])
LINE_HALF_WIDTH = 0.75  # pixels


def camera_window(world: WorldState, camera: str) -> tuple[float, float, float, float]:
    """World rectangle ``(x0, y0, x1, y1)`` seen by ``camera``."""
    cfg = world.config
    if camera in ("wrist_left", "wrist_right"):
        cx, cy = world.ee(camera.split("_")[1])
        h = cfg.wrist_window / 2
        return cx - h, cy - h, cx + h, cy + h
    if camera == "top":
        return 0.0, 0.0, cfg.workspace[0], cfg.workspace[1]
    if camera == "front":
        # low, wide view of the working band above the table
        return 0.0, -0.02, cfg.workspace[0], 0.42
    raise ValueError(f"unknown camera {camera!r}")


class _Canvas:
    def __init__(self, window, size: int):
        self.x0, self.y0, self.x1, self.y1 = window
        self.size = size
        self.img = np.empty((size, size, 3))
        self.img[:] = BACKGROUND
        centers = np.arange(size) + 0.5
        self.px, self.py = np.meshgrid(centers, centers)  # column, row

    def to_pixel(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        u = (p[..., 0] - self.x0) / (self.x1 - self.x0) * self.size
        v = (self.y1 - p[..., 1]) / (self.y1 - self.y0) * self.size
        return np.stack([u, v], axis=-1)

    def segment(self, a, b, color, half_width=LINE_HALF_WIDTH):
        a, b = self.to_pixel(a), self.to_pixel(b)
        lo = np.minimum(a, b) - half_width
        hi = np.maximum(a, b) + half_width
        if hi[0] < 0 or hi[1] < 0 or lo[0] > self.size or lo[1] > self.size:
            return
        d = b - a
        denom = float(d @ d)
        rx, ry = self.px - a[0], self.py - a[1]
        s = np.clip((rx * d[0] + ry * d[1]) / denom, 0.0, 1.0) if denom > 0 else np.zeros_like(rx)
        dist2 = (rx - s * d[0]) ** 2 + (ry - s * d[1]) ** 2
        self.img[dist2 <= half_width * half_width] = color

    def rect(self, center, half_size, color, min_half_px=0.5):
        c = self.to_pixel(center)
        hx = max(half_size / (self.x1 - self.x0) * self.size, min_half_px)
        hy = max(half_size / (self.y1 - self.y0) * self.size, min_half_px)
        mask = (np.abs(self.px - c[0]) <= hx) & (np.abs(self.py - c[1]) <= hy)
        self.img[mask] = color


def render(world: WorldState, camera: str) -> np.ndarray:
    """``(S, S, 3)`` float image in [0, 1] for one camera."""
    cfg = world.config
    canvas = _Canvas(camera_window(world, camera), cfg.image_size)
    if world.bar is not None:
        a, b = world.bar.endpoints()
        canvas.segment(a, b, BAR_COLOR, half_width=1.0)
    for obj in world.objects:
        canvas.rect(obj.position, cfg.box_half_size, BOX_COLOR)
    for side in ("left", "right"):
        arm = world.arm(side)
        pts = link_points(arm)
        for a, b in zip(pts[:-1], pts[1:]):
            canvas.segment(a, b, ARM_COLORS[side])
        # gripper marker brightness encodes aperture
        canvas.rect(pts[-1], 0.0, np.full(3, 0.4 + 0.6 * arm.gripper), min_half_px=1.0)
    return canvas.img


def render_all(world: WorldState) -> np.ndarray:
    """All cameras stacked in ``CAMERAS`` order, shape (4, S, S, 3)."""
    return np.stack([render(world, cam) for cam in CAMERAS])

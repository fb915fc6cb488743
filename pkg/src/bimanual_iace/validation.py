"""Input checks shared by the estimator and the command-line harness."""

from __future__ import annotations

import numpy as np

from .data import EpisodeRecord
from .policy import CAMERAS, ObservationError, ObservationFrame


def check_episodes(episodes) -> list[EpisodeRecord]:
    episodes = list(episodes)
    if not episodes:
        raise ValueError("need at least one episode to fit")
    first = episodes[0]
    for ep in episodes:
        if not isinstance(ep, EpisodeRecord):
            raise TypeError(f"expected EpisodeRecord, got {type(ep).__name__}")
        if ep.T < 1:
            raise ValueError("episodes must contain at least one frame")
        if ep.joints.shape[1] != first.joints.shape[1] or ep.images.shape[1:] != first.images.shape[1:]:
            raise ValueError("all episodes must share joint and image dimensions")
        if ep.rate_hz != first.rate_hz:
            raise ValueError("all episodes must share one rate")
        if not (np.all(np.isfinite(ep.joints)) and np.all(np.isfinite(ep.actions))):
            raise ValueError("episode contains non-finite joints or actions")
    return episodes


def check_observations(observations, joint_dim: int, image_shape) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the accepted observation forms to ``(N, 2J)`` and ``(N, 4, H, W, C)`` float arrays."""
    if isinstance(observations, ObservationFrame):
        observations = [observations]
    if isinstance(observations, tuple) and len(observations) == 2 and not isinstance(observations[0], ObservationFrame):
        joints = np.asarray(observations[0], dtype=np.float64)
        images = np.asarray(observations[1])
        if joints.ndim == 1:
            joints, images = joints[None], images[None]
    else:
        frames = list(observations)
        if not frames:
            raise ObservationError("no observations given")
        for f in frames:
            f.validate(image_shape)
        joints = np.stack([f.joints() for f in frames]).astype(np.float64)
        images = np.stack([f.image_stack() for f in frames])
    if joints.ndim != 2 or joints.shape[1] != 2 * joint_dim:
        raise ObservationError(f"joints must be (N, {2 * joint_dim}), got {joints.shape}")
    expected = (len(joints), len(CAMERAS), *image_shape)
    if images.shape != expected:
        raise ObservationError(f"images must be {expected}, got {images.shape}")
    if not np.all(np.isfinite(joints)):
        raise ObservationError("non-finite joint values")
    return joints, np.ascontiguousarray(images)

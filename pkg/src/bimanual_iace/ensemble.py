"""Temporal ensembling of overlapping action chunks."""

from __future__ import annotations

from collections import deque

import numpy as np


class EnsembleError(RuntimeError):
    pass


class EnsembleBuffer:
    """Chunks issued at increasing control ticks, each covering ``k`` future ticks.

    The action for tick ``t`` averages every retained chunk's row for ``t``
    with weights ``exp(-decay * age)``, ``age = t - issue_tick``, so older
    predictions count less when ``decay > 0``.
    """

    def __init__(self, horizon: int, decay: float = 0.01):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if decay < 0:
            raise ValueError("decay must be >= 0")
        self.horizon = horizon
        self.decay = decay
        self.records: deque[tuple[int, np.ndarray]] = deque()

    def __len__(self) -> int:
        return len(self.records)

    def _evict(self, t: int) -> None:
        while self.records and self.records[0][0] < t - self.horizon + 1:
            self.records.popleft()

    def push(self, t: int, chunk) -> "EnsembleBuffer":
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[0] != self.horizon:
            raise ValueError(f"chunk must have {self.horizon} rows, got shape {chunk.shape}")
        if self.records and t <= self.records[-1][0]:
            raise EnsembleError(f"push at t={t} after t={self.records[-1][0]}: ticks must strictly increase")
        self.records.append((t, chunk))
        self._evict(t)
        return self

    def weights(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Normalized weights and the matching chunk rows for tick ``t``."""
        self._evict(t)
        rows = [(t - issue, chunk[t - issue]) for issue, chunk in self.records if issue <= t]
        if not rows:
            raise EnsembleError(f"no chunk covers tick {t}")
        ages = np.array([age for age, _ in rows], dtype=np.float64)
        w = np.exp(-self.decay * ages)
        return w / w.sum(), np.stack([r for _, r in rows])

    def action(self, t: int) -> np.ndarray:
        w, rows = self.weights(t)
        # offsets from the newest row: rows that agree reproduce it exactly
        anchor = rows[-1]
        return anchor + w @ (rows - anchor)


def push_chunk(buffer: EnsembleBuffer, t: int, chunk) -> EnsembleBuffer:
    return buffer.push(t, chunk)


def ensemble_action(buffer: EnsembleBuffer, t: int) -> np.ndarray:
    return buffer.action(t)

"""Closed-loop policy rollouts in the simulator with temporal ensembling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .ensemble import EnsembleBuffer
from .sim.render import render_all
from .sim.tasks import TaskSpec, get_task, success
from .sim.world import SimConfig, WorldState, step

# evaluation initial states are drawn from seeds no demonstration uses
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class RolloutResult:
    success: bool
    subscores: dict[str, bool]
    latencies: list[float] = field(default_factory=list)
    trajectory: list[WorldState] | None = None


def rollout_policy(
    policy,
    task: TaskSpec | str,
    seed: int,
    control_stride: int = 2,
    decay: float = 0.01,
    replan_every: int = 1,
    keep_trajectory: bool = False,
) -> RolloutResult:
    """Run ``policy`` for one episode.

    The simulator ticks at its native rate; the policy acts every
    ``control_stride`` ticks (50 Hz / 2 = the 25 Hz training rate) and each
    chosen action is held until the next control tick.
    """
    task = get_task(task) if isinstance(task, str) else task
    rng = np.random.default_rng(np.random.SeedSequence([EVAL_SEED_OFFSET, seed]))
    world = task.sample_initial(rng, SimConfig())
    k = policy.chunk_size
    J = len(world.left.joint_vector())
    buffer = EnsembleBuffer(k, decay)
    traj = [world]
    latencies = []
    action = None
    for tick in range(task.horizon):
        if tick % control_stride == 0:
            c = tick // control_stride
            replan = c % replan_every == 0 or len(buffer) == 0
            if replan:
                obs = (world.joint_vector()[None], render_all(world)[None].astype(np.float32))
            start = time.perf_counter()
            if replan:
                chunk = policy.predict(obs)[0]
                buffer.push(c, chunk)
            action = buffer.action(c)
            latencies.append(time.perf_counter() - start)
        world = step(world, action[:J], action[J:])
        traj.append(world)
    ok, subs = success(traj, task)
    return RolloutResult(ok, subs, latencies, traj if keep_trajectory else None)

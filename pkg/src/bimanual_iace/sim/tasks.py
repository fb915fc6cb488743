"""Scripted bimanual tasks: handover (asynchronous) and bar lift (synchronous).

Experts are stateless: the phase is read off the world (who holds what, where
it is), so the same rule set also tells a learned policy's rollout apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..data import EpisodeRecord
from .kinematics import ArmState, ik
from .render import render_all
from .world import Bar, SimConfig, WorldObject, WorldState, step

ELBOW = {"left": -1, "right": 1}
HOME = {"left": np.array([0.3, 0.16]), "right": np.array([0.7, 0.16])}
# where an arm rests once its part is done; kept apart from HOME so finished and
# unstarted episodes look different from the joints alone
PARK = {"left": np.array([0.25, 0.24]), "right": np.array([0.75, 0.24])}
TOL = 0.012
OPEN, CLOSED = 1.0, 0.0
# expert targets run this many simulation steps ahead: one 25 Hz control period
ACTION_LOOKAHEAD = 2

# handover geometry
BOX_X_RANGE = (0.6, 0.66)
HANDOVER_POINT = np.array([0.5, 0.15])
PLACE_POINT = np.array([0.34, 0.02])
APPROACH_HEIGHT = 0.08
PLACE_TOL = 0.04
PICK_LIFT = 0.04

# bar-lift geometry
BAR_X_RANGE = (0.44, 0.50)
BAR_TARGET_X = 0.56
BAR_LIFT_Y = 0.14
BAR_DONE_X = 0.53
BAR_SPEED = 0.005  # m per tick, expert carry lookahead
TILT_MAX = 0.15
BAR_LIFTED = 0.08  # above rest counts as lifted
BAR_PLACE_TOL = 0.02
BAR_GENTLE = 0.03


class UnknownTask(KeyError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_class: str  # asynchronous | synchronous
    horizon: int  # ticks at the simulation rate
    subscores: tuple[str, ...]
    sample_initial: Callable[[np.random.Generator, SimConfig], WorldState]
    expert: Callable[[WorldState, float, np.random.Generator], tuple[np.ndarray, np.ndarray]]
    score: Callable[[list[WorldState]], dict[str, bool]]


def arm_target(world: WorldState, side: str, point, grip: float) -> np.ndarray:
    arm = world.arm(side)
    return np.append(ik(point, arm.base, arm.links, ELBOW[side]), grip)


def _home_arms(rng: np.random.Generator, cfg: SimConfig) -> tuple[ArmState, ArmState]:
    arms = []
    for side, base in (("left", cfg.base_left), ("right", cfg.base_right)):
        q = ik(HOME[side], base, cfg.links, ELBOW[side]) + rng.uniform(-0.05, 0.05, 3)
        arms.append(ArmState(q, OPEN, base, cfg.links))
    return arms[0], arms[1]


def _paced(arm: ArmState, goal: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Command at most ``ACTION_LOOKAHEAD`` rate-limited steps ahead of the arm, not the far goal.

    The simulator clamps every step anyway, so the motion is unchanged, but the
    recorded targets become a smooth function of the state.
    """
    dq = np.clip(goal[:3] - arm.angles, -ACTION_LOOKAHEAD * cfg.max_joint_step, ACTION_LOOKAHEAD * cfg.max_joint_step)
    dg = np.clip(goal[3] - arm.gripper, -ACTION_LOOKAHEAD * cfg.max_gripper_step, ACTION_LOOKAHEAD * cfg.max_gripper_step)
    return np.append(arm.angles + dq, arm.gripper + dg)


def _command(world: WorldState, goals, noise_scale: float, rng: np.random.Generator):
    out = []
    for side, goal in zip(("left", "right"), goals):
        action = _paced(world.arm(side), goal, world.config)
        if noise_scale > 0:
            action[:3] += rng.normal(0.0, noise_scale, 3)
        out.append(action)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# handover
# ---------------------------------------------------------------------------


def handover_initial(rng: np.random.Generator, cfg: SimConfig = SimConfig()) -> WorldState:
    left, right = _home_arms(rng, cfg)
    box = WorldObject(np.array([rng.uniform(*BOX_X_RANGE), cfg.box_rest_y]))
    return WorldState(left, right, [box], None, 0, cfg)


def _staged_reach(ee: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Go above ``goal`` first, then down onto it; once descending, tolerate more sideways drift."""
    dx = abs(ee[0] - goal[0])
    if dx < 0.02 or (ee[1] < APPROACH_HEIGHT - 0.005 and dx < 0.035):
        return goal
    return np.array([goal[0], max(goal[1], APPROACH_HEIGHT)])


def handover_expert(world: WorldState, noise_scale: float, rng: np.random.Generator):
    box = world.objects[0]
    e_l, e_r = world.ee("left"), world.ee("right")
    held = box.held_by
    home_l = arm_target(world, "left", HOME["left"], OPEN)
    home_r = arm_target(world, "right", HOME["right"], OPEN)

    if held == "none" and box.position[0] >= 0.45:
        grasp = box.position
        close = np.linalg.norm(e_r - grasp) < TOL
        act_r = arm_target(world, "right", _staged_reach(e_r, grasp), CLOSED if close else OPEN)
        act_l = home_l
    elif held == "right":
        act_r = arm_target(world, "right", HANDOVER_POINT, CLOSED)
        if np.linalg.norm(e_r - HANDOVER_POINT) < TOL:
            close = np.linalg.norm(e_l - HANDOVER_POINT) < TOL
            act_l = arm_target(world, "left", HANDOVER_POINT, CLOSED if close else OPEN)
        else:
            act_l = home_l
    elif held == "both":
        act_r = arm_target(world, "right", HANDOVER_POINT, OPEN)
        act_l = arm_target(world, "left", HANDOVER_POINT, CLOSED)
    elif held == "left":
        act_r = arm_target(world, "right", PARK["right"], OPEN)
        release = np.linalg.norm(e_l - PLACE_POINT) < TOL
        act_l = arm_target(world, "left", _staged_reach(e_l, PLACE_POINT), OPEN if release else CLOSED)
    else:
        act_l = arm_target(world, "left", PARK["left"], OPEN)
        act_r = arm_target(world, "right", PARK["right"], OPEN)
    return _command(world, (act_l, act_r), noise_scale, rng)


def handover_score(trajectory: list[WorldState]) -> dict[str, bool]:
    pick = handover = False
    for w in trajectory:
        box = w.objects[0]
        if box.held_by in ("right", "both") and box.position[1] >= w.config.box_rest_y + PICK_LIFT:
            pick = True
        if pick and box.held_by == "left":
            handover = True
    place = False
    if trajectory:
        box = trajectory[-1].objects[0]
        place = box.held_by == "none" and abs(box.position[0] - PLACE_POINT[0]) < PLACE_TOL
    return {"pick": pick, "handover": handover, "place": place}


# ---------------------------------------------------------------------------
# bar lift
# ---------------------------------------------------------------------------


def bar_initial(rng: np.random.Generator, cfg: SimConfig = SimConfig()) -> WorldState:
    left, right = _home_arms(rng, cfg)
    bar = Bar(np.array([rng.uniform(*BAR_X_RANGE), cfg.bar_rest_y]), 0.0, "none", cfg.bar_length)
    return WorldState(left, right, [], bar, 0, cfg)


def bar_expert(world: WorldState, noise_scale: float, rng: np.random.Generator):
    bar = world.bar
    cfg = world.config
    ee = {"left": world.ee("left"), "right": world.ee("right")}
    rest = bar.center[1] <= cfg.bar_rest_y + 1e-12

    if bar.held_by == "none" and rest and bar.center[0] >= BAR_DONE_X:
        acts = [arm_target(world, s, PARK[s], OPEN) for s in ("left", "right")]
    elif bar.held_by != "both":
        ends = dict(zip(("left", "right"), bar.endpoints()))
        at_end = {s: np.linalg.norm(ee[s] - ends[s]) < TOL for s in ends}
        grip = CLOSED if all(at_end.values()) else OPEN
        acts = [arm_target(world, s, _bar_reach(ee[s], ends[s]), grip) for s in ("left", "right")]
    else:
        c = bar.center
        grip = CLOSED
        if abs(c[0] - BAR_TARGET_X) > 0.015:
            goal = np.array([c[0], BAR_LIFT_Y]) if c[1] < BAR_LIFT_Y - 0.01 else np.array([BAR_TARGET_X, BAR_LIFT_Y])
        else:
            goal = np.array([BAR_TARGET_X, cfg.bar_rest_y])
            if c[1] <= cfg.bar_rest_y + 0.006:
                grip = OPEN
        delta = goal - c
        dist = float(np.hypot(*delta))
        nxt = c + (delta if dist <= BAR_SPEED else delta * (BAR_SPEED / dist))
        half = np.array([bar.length / 2, 0.0])
        acts = [arm_target(world, "left", nxt - half, grip), arm_target(world, "right", nxt + half, grip)]
    return _command(world, acts, noise_scale, rng)


def _bar_reach(ee: np.ndarray, end: np.ndarray) -> np.ndarray:
    dx = abs(ee[0] - end[0])
    if dx < 0.02 or (ee[1] < end[1] + 0.045 and dx < 0.035):
        return end
    return end + np.array([0.0, 0.05])


def bar_score(trajectory: list[WorldState]) -> dict[str, bool]:
    grasp_both = lifted = tilt_ok = False
    tilt_violated = False
    last_held_height = None
    for w in trajectory:
        bar = w.bar
        rest = w.config.bar_rest_y
        if bar.held_by == "both":
            grasp_both = True
            last_held_height = bar.center[1]
            if bar.center[1] >= rest + BAR_LIFTED:
                lifted = True
            if abs(bar.tilt) >= TILT_MAX:
                tilt_violated = True
    tilt_ok = lifted and not tilt_violated
    place = False
    if trajectory and lifted:
        bar = trajectory[-1].bar
        rest = trajectory[-1].config.bar_rest_y
        place = (
            bar.held_by == "none"
            and abs(bar.center[0] - BAR_TARGET_X) < BAR_PLACE_TOL
            and last_held_height is not None
            and last_held_height - rest < BAR_GENTLE
        )
    return {"grasp_both": grasp_both, "lift_sync": tilt_ok, "place": place}


TASKS: dict[str, TaskSpec] = {
    "handover": TaskSpec(
        "handover", "asynchronous", 220, ("pick", "handover", "place"),
        handover_initial, handover_expert, handover_score,
    ),
    "bar_lift": TaskSpec(
        "bar_lift", "synchronous", 200, ("grasp_both", "lift_sync", "place"),
        bar_initial, bar_expert, bar_score,
    ),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise UnknownTask(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def scripted_expert(task: TaskSpec | str, world: WorldState, noise_scale: float, rng: np.random.Generator):
    task = get_task(task) if isinstance(task, str) else task
    return task.expert(world, noise_scale, rng)


def success(trajectory: list[WorldState], task: TaskSpec | str) -> tuple[bool, dict[str, bool]]:
    task = get_task(task) if isinstance(task, str) else task
    if not trajectory:
        return False, {k: False for k in task.subscores}
    subs = task.score(trajectory)
    return all(subs.values()), subs


def rollout_expert(task: TaskSpec, rng: np.random.Generator, noise_scale: float, record_images: bool = True):
    """One expert episode; returns (joints, actions, images, trajectory)."""
    world = task.sample_initial(rng, SimConfig())
    joints, actions, images, traj = [], [], [], [world]
    for _ in range(task.horizon):
        a_l, a_r = task.expert(world, noise_scale, rng)
        joints.append(world.joint_vector())
        actions.append(np.concatenate([a_l, a_r]))
        if record_images:
            images.append(render_all(world))
        world = step(world, a_l, a_r)
        traj.append(world)
    return joints, actions, images, traj


def generate_demos(task: TaskSpec | str, count: int, noise_scale: float = 0.01, seed: int = 0, max_retries: int = 10) -> list[EpisodeRecord]:
    """``count`` successful expert episodes at the simulation rate."""
    task = get_task(task) if isinstance(task, str) else task
    episodes = []
    for i in range(count):
        for attempt in range(max_retries + 1):
            ep_seed = int(np.random.SeedSequence([seed, i, attempt]).generate_state(1)[0])
            rng = np.random.default_rng(ep_seed)
            joints, actions, images, traj = rollout_expert(task, rng, noise_scale)
            ok, subs = success(traj, task)
            if ok:
                break
        else:
            raise RuntimeError(f"{task.name}: expert failed {max_retries + 1} times for episode {i}")
        episodes.append(EpisodeRecord(
            SimConfig().rate_hz, np.array(joints), np.array(actions), np.array(images),
            task=task.name, seed=ep_seed, success=subs,
        ))
    return episodes

"""Toy 2-D continuous-control tasks with dense ground-truth rewards.

``point_reach`` moves a point agent to a goal. ``two_phase_pull`` first has to
reach a handle (which grasps it) and then drag the handle to a target; the
+1 bonus after grasping is the exploration cliff.

Two vector views of a state exist: :func:`encode` is a lossless raw vector
(decodable, used to replay segments), and :func:`observe` maps raw vectors to
the translation-invariant features that networks consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

EPISODE_LEN = 100
GAIN = 0.1
SUCCESS_RADIUS = 0.05
GRASP_RADIUS = 0.05
POS_LIMIT = 1.2
ACTION_DIM = 2

# Sampling boxes (x_lo, x_hi, y_lo, y_hi); disjoint in x for every task.
POINT_AGENT_BOX = (-0.9, -0.3, -0.6, 0.6)
POINT_GOAL_BOX = (0.3, 0.9, -0.6, 0.6)
PULL_AGENT_BOX = (-0.9, -0.5, -0.6, 0.6)
PULL_HANDLE_BOX = (-0.2, 0.2, -0.6, 0.6)
PULL_TARGET_BOX = (0.5, 0.9, -0.6, 0.6)


class EnvKind(str, Enum):
    POINT_REACH = "point_reach"
    TWO_PHASE_PULL = "two_phase_pull"


STATE_DIM = {EnvKind.POINT_REACH: 4, EnvKind.TWO_PHASE_PULL: 7}
OBS_DIM = {EnvKind.POINT_REACH: 2, EnvKind.TWO_PHASE_PULL: 5}


@dataclass(frozen=True)
class EnvState:
    kind: EnvKind
    pos: tuple[float, float]
    goal: tuple[float, float] = (0.0, 0.0)  # point_reach goal
    handle: tuple[float, float] = (0.0, 0.0)
    grasped: bool = False
    target: tuple[float, float] = (0.0, 0.0)
    t: int = 0


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    true_reward: float
    success: bool
    done: bool


def _box(rng: np.random.Generator, box) -> tuple[float, float]:
    x_lo, x_hi, y_lo, y_hi = box
    return (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))


def box_center(box) -> tuple[float, float]:
    return ((box[0] + box[1]) / 2.0, (box[2] + box[3]) / 2.0)


def reset(kind: EnvKind | str, rng_seed) -> EnvState:
    """Fresh episode; ``rng_seed`` is an int, SeedSequence, or Generator."""
    kind = EnvKind(kind)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if kind is EnvKind.POINT_REACH:
        return EnvState(kind, pos=_box(rng, POINT_AGENT_BOX), goal=_box(rng, POINT_GOAL_BOX))
    return EnvState(
        kind,
        pos=_box(rng, PULL_AGENT_BOX),
        handle=_box(rng, PULL_HANDLE_BOX),
        target=_box(rng, PULL_TARGET_BOX),
    )


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def step(state: EnvState, action) -> StepResult:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have shape ({ACTION_DIM},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a}")
    a = np.clip(a, -1.0, 1.0)
    x = min(max(state.pos[0] + GAIN * a[0], -POS_LIMIT), POS_LIMIT)
    y = min(max(state.pos[1] + GAIN * a[1], -POS_LIMIT), POS_LIMIT)
    pos = (float(x), float(y))
    t = state.t + 1

    if state.kind is EnvKind.POINT_REACH:
        d = _dist(pos, state.goal)
        nxt = EnvState(state.kind, pos=pos, goal=state.goal, t=t)
        success = d < SUCCESS_RADIUS
        return StepResult(nxt, -d, success, success or t >= EPISODE_LEN)

    grasped = state.grasped or _dist(pos, state.handle) < GRASP_RADIUS
    handle = pos if grasped else state.handle
    if grasped:
        reward = 1.0 - _dist(handle, state.target)
    else:
        reward = -_dist(pos, handle)
    nxt = EnvState(state.kind, pos=pos, handle=handle, grasped=grasped, target=state.target, t=t)
    success = grasped and _dist(handle, state.target) < SUCCESS_RADIUS
    return StepResult(nxt, reward, success, success or t >= EPISODE_LEN)


def expert_action(kind: EnvKind | str, state: EnvState) -> np.ndarray:
    """Proportional controller toward the current objective, clipped to [-1, 1]."""
    kind = EnvKind(kind)
    pos = np.asarray(state.pos)
    if kind is EnvKind.POINT_REACH:
        aim = np.asarray(state.goal)
    else:
        aim = np.asarray(state.target if state.grasped else state.handle)
    return np.clip(4.0 * (aim - pos), -1.0, 1.0)


def encode(state: EnvState) -> np.ndarray:
    """Raw state vector; :func:`decode` inverts it exactly."""
    p = state.pos
    if state.kind is EnvKind.POINT_REACH:
        return np.array([p[0], p[1], state.goal[0], state.goal[1]])
    h, tg = state.handle, state.target
    return np.array([p[0], p[1], h[0], h[1], float(state.grasped), tg[0], tg[1]])


def observe(kind: EnvKind | str, raw) -> np.ndarray:
    """Network features from raw state rows: offsets to the current objectives.

    point_reach: goal - pos. two_phase_pull: handle - pos, grasped flag,
    target - handle.
    """
    kind = EnvKind(kind)
    raw = np.asarray(raw, dtype=np.float64)
    if kind is EnvKind.POINT_REACH:
        return raw[..., 2:4] - raw[..., 0:2]
    return np.concatenate(
        [raw[..., 2:4] - raw[..., 0:2], raw[..., 4:5], raw[..., 5:7] - raw[..., 2:4]], axis=-1
    )


def decode(kind: EnvKind | str, raw, t: int = 0) -> EnvState:
    kind = EnvKind(kind)
    o = [float(v) for v in raw]
    if kind is EnvKind.POINT_REACH:
        return EnvState(kind, pos=(o[0], o[1]), goal=(o[2], o[3]), t=t)
    return EnvState(
        kind, pos=(o[0], o[1]), handle=(o[2], o[3]), grasped=o[4] > 0.5, target=(o[5], o[6]), t=t
    )


def objective_distance(state: EnvState) -> float:
    """Distance the expert is currently closing (goal, handle, or target)."""
    if state.kind is EnvKind.POINT_REACH:
        return _dist(state.pos, state.goal)
    if state.grasped:
        return _dist(state.handle, state.target)
    return _dist(state.pos, state.handle)


@dataclass
class Segment:
    """H consecutive (state, action) pairs plus their hidden true return."""

    kind: EnvKind
    states: np.ndarray  # (H, STATE_DIM) raw, decodable
    actions: np.ndarray  # (H, ACTION_DIM)
    oracle_return: float

    @property
    def obs(self) -> np.ndarray:
        return observe(self.kind, self.states)

    def __len__(self) -> int:
        return len(self.actions)

    def inputs(self) -> np.ndarray:
        """Rows of ``obs || action`` as fed to reward networks."""
        return np.concatenate([self.obs, self.actions], axis=1)


def oracle_return(segment: Segment) -> float:
    """Recompute the segment's true return by replaying each step."""
    total = 0.0
    for x, a in zip(segment.states, segment.actions):
        total += step(decode(segment.kind, x), a).true_reward
    return total


def rollout(kind: EnvKind | str, policy, seed, stop_on_success: bool = True, max_steps: int = EPISODE_LEN):
    """Run one episode; ``policy(state, obs) -> action``.

    Returns ``(states, actions, rewards, success)`` where ``states`` holds the
    raw pre-action state vector of each step.
    """
    kind = EnvKind(kind)
    state = reset(kind, seed)
    rows, acts, rews = [], [], []
    success = False
    for _ in range(max_steps):
        x = encode(state)
        a = np.clip(np.asarray(policy(state, observe(kind, x)), dtype=np.float64), -1.0, 1.0)
        res = step(state, a)
        rows.append(x)
        acts.append(a)
        rews.append(res.true_reward)
        state = res.next_state
        if res.success:
            success = True
            if stop_on_success:
                break
    return np.array(rows), np.array(acts), np.array(rews), success

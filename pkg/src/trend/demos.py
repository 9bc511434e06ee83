"""Few-shot expert demonstrations: generation, persistence, and BC training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .envs import EnvKind, expert_action, observe, rollout
from .ndmath import AdamState, adam_step, backward_cached
from .sac import ReplayBuffer, SacAgent, UpdateReport, policy_head, update

log = logging.getLogger(__name__)

DEMO_HEADER = "trenddemo-v1"
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class DemoSet:
    kind: EnvKind
    trajectories: tuple[tuple[np.ndarray, np.ndarray], ...]  # (raw states (T, k), actions (T, 2))
    version: str = DEMO_HEADER

    def __post_init__(self):
        if not 1 <= len(self.trajectories) <= 3:
            raise ValueError(f"a demo set holds 1-3 trajectories, got {len(self.trajectories)}")
        states = np.concatenate([x for x, _ in self.trajectories])
        object.__setattr__(self, "_obs", observe(self.kind, states))
        object.__setattr__(self, "_actions", np.concatenate([a for _, a in self.trajectories]))

    @property
    def obs(self) -> np.ndarray:
        """Network features of every demo step."""
        return self._obs

    @property
    def actions(self) -> np.ndarray:
        return self._actions

    def __len__(self) -> int:
        return sum(len(a) for _, a in self.trajectories)


def generate_demos(kind: EnvKind | str, n: int, seed: int) -> DemoSet:
    """``n`` successful expert episodes under distinct reset seeds."""
    kind = EnvKind(kind)
    if n not in (1, 2, 3):
        raise ValueError(f"number of demonstrations must be 1, 2 or 3, got {n}")
    children = iter(np.random.SeedSequence([seed, 0xDE70]).spawn(n + MAX_RESAMPLES))
    trajs = []
    while len(trajs) < n:
        try:
            child = next(children)
        except StopIteration:
            raise RuntimeError(f"expert failed on {MAX_RESAMPLES} resampled seeds") from None
        obs, act, _, success = rollout(kind, lambda s, o: expert_action(kind, s), child)
        if not success:
            log.warning("expert rollout failed on %s; resampling seed", child.entropy)
            continue
        trajs.append((obs, act))
    return DemoSet(kind, tuple(trajs))


def save_demos(demos: DemoSet, path) -> None:
    """Text format: header line, ``env=<kind>`` line, then one CSV row per step.

    Rows hold state components then action components; a blank line ends
    each trajectory. Floats use ``repr`` so loading is bit-exact.
    """
    lines = [DEMO_HEADER, f"env={demos.kind.value}"]
    for states, act in demos.trajectories:
        for o, a in zip(states, act):
            lines.append(",".join(repr(float(v)) for v in (*o, *a)))
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path, action_dim: int = 2) -> DemoSet:
    path = Path(path)
    lines = path.read_text().split("\n")
    if not lines or lines[0].strip() != DEMO_HEADER:
        raise ValueError(f"{path}: first line must be {DEMO_HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith("env="):
        raise ValueError(f"{path}: second line must be 'env=<kind>'")
    kind = EnvKind(lines[1][4:].strip())
    trajs, rows = [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if line.strip():
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        elif rows:
            arr = np.array(rows)
            trajs.append((arr[:, :-action_dim], arr[:, -action_dim:]))
            rows = []
    if rows:
        arr = np.array(rows)
        trajs.append((arr[:, :-action_dim], arr[:, -action_dim:]))
    return DemoSet(kind, tuple(trajs))


def bc_loss(agent: SacAgent, demos: DemoSet) -> float:
    mu, _, _, _ = policy_head(agent.policy, demos.obs)
    diff = np.tanh(mu) - demos.actions
    return float(np.mean(np.sum(diff * diff, axis=1)))


def bc_pretrain(
    agent: SacAgent,
    demos: DemoSet,
    epochs: int = 500,
    lr: float = 1e-3,
    early_stop: bool = True,
    patience: int = 50,
    min_delta: float = 1e-6,
) -> list[float]:
    """Full-batch regression of the squashed mean action onto expert actions.

    Returns the per-epoch loss history. Stops early when the loss has not
    improved by ``min_delta`` for ``patience`` epochs.
    """
    obs, act = demos.obs, demos.actions
    if len(obs) == 0:
        raise ValueError("empty demonstration set")
    opt = AdamState.for_params(agent.policy, lr=lr)
    d = agent.act_dim
    history: list[float] = []
    best, stale = math.inf, 0
    for _ in range(epochs):
        mu, _, _, cache = policy_head(agent.policy, obs)
        ta = np.tanh(mu)
        diff = ta - act
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        history.append(loss)
        upstream = np.zeros((len(obs), 2 * d))
        upstream[:, :d] = 2.0 * diff * (1.0 - ta * ta) / len(obs)
        grads, _ = backward_cached(agent.policy, cache, upstream)
        adam_step(opt, agent.policy, grads)
        if loss < best - min_delta:
            best, stale = loss, 0
        else:
            stale += 1
            if early_stop and stale >= patience:
                break
    return history


@dataclass(frozen=True)
class AlphaSchedule:
    """Share of each policy batch drawn from demonstrations, decayed linearly."""

    start: float = 0.5
    end: float = 0.25
    horizon: int = 50_000

    def __call__(self, t: int) -> float:
        if t >= self.horizon or self.horizon <= 0:
            return self.end
        frac = max(t, 0) / self.horizon
        return self.start + (self.end - self.start) * frac


def demo_count(alpha: float, batch_size: int) -> int:
    return min(batch_size, math.ceil(alpha * batch_size - 1e-12))


def mixed_policy_update(
    agent: SacAgent,
    demos: Optional[DemoSet],
    replay: ReplayBuffer,
    t: int,
    bc_weight: float,
    schedule: AlphaSchedule,
    rng: np.random.Generator,
    batch_size: int = 256,
) -> UpdateReport:
    """One SAC + BC step: ``ceil(alpha(t) * B)`` demo steps feed only the BC term,
    the rest of the batch comes from replay and feeds the SAC losses."""
    alpha = schedule(t)
    n_demo = demo_count(alpha, batch_size) if alpha > 0 else 0
    if n_demo and (demos is None or len(demos) == 0):
        raise ValueError("demo fraction is positive but no demonstrations were provided")
    demo_obs = demo_act = None
    if n_demo:
        idx = rng.integers(len(demos), size=n_demo)
        demo_obs, demo_act = demos.obs[idx], demos.actions[idx]
    n_replay = batch_size - n_demo
    batch = replay.sample(n_replay, rng) if n_replay else None
    return update(agent, batch, rng, demo_obs, demo_act, bc_weight)

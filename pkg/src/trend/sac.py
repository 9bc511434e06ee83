"""Soft actor-critic with a tanh-squashed Gaussian policy and twin critics.

Networks come from :mod:`trend.ndmath`; all gradients are assembled by hand.
The policy head emits ``2 * action_dim`` values: means, then raw log-stds
which are clamped to ``[LOG_STD_MIN, LOG_STD_MAX]`` (zero gradient outside).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .envs import Segment
from .ndmath import (
    AdamState,
    MlpSpec,
    ParamSet,
    adam_step,
    backward_cached,
    forward_cached,
    init_params,
    soft_update,
)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# tanh saturates to exactly 1.0 in float64 for |u| > ~19
ACTION_BOUND = 1.0 - 1e-9


def softplus(x):
    return np.logaddexp(0.0, x)


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))


def tanh_gaussian_logprob(u, mu, log_std):
    """Log-density of ``a = tanh(u)`` with ``u ~ N(mu, exp(log_std)^2)``, summed over dims."""
    z = (u - mu) / np.exp(log_std)
    gauss = -0.5 * z * z - log_std - HALF_LOG_2PI
    return (gauss - log1m_tanh_sq(u)).sum(axis=-1)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r_hat: float
    s_next: np.ndarray
    done: bool


@dataclass
class ReplayBuffer:
    """Ring buffer of transitions that also remembers episode boundaries.

    ``true_r`` holds the environment reward and ``states`` the raw state
    vectors; learning code never reads either, they only back the segments
    handed to annotators.
    """

    obs_dim: int
    act_dim: int
    capacity: int = 100_000
    state_dim: int = 0
    counter: int = 0
    episodes: list = field(default_factory=list)  # (start_counter, length)
    _episode_start: int = 0

    def __post_init__(self):
        c = self.capacity
        self.obs = np.zeros((c, self.obs_dim))
        self.act = np.zeros((c, self.act_dim))
        self.r_hat = np.zeros(c)
        self.next_obs = np.zeros((c, self.obs_dim))
        self.done = np.zeros(c, dtype=bool)
        self.true_r = np.zeros(c)
        self.states = np.zeros((c, self.state_dim))

    def __len__(self) -> int:
        return min(self.counter, self.capacity)

    def add(self, s, a, r_hat, s_next, done, true_r=0.0, raw_state=None) -> None:
        i = self.counter % self.capacity
        if raw_state is not None:
            self.states[i] = raw_state
        self.obs[i] = s
        self.act[i] = a
        self.r_hat[i] = r_hat
        self.next_obs[i] = s_next
        self.done[i] = done
        self.true_r[i] = true_r
        self.counter += 1

    def end_episode(self) -> None:
        length = self.counter - self._episode_start
        if length > 0:
            self.episodes.append((self._episode_start, length))
        self._episode_start = self.counter

    def transition(self, i: int) -> Transition:
        return Transition(self.obs[i].copy(), self.act[i].copy(), float(self.r_hat[i]),
                          self.next_obs[i].copy(), bool(self.done[i]))

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform indices, without replacement inside one batch."""
        size = len(self)
        if n > size:
            raise ValueError(f"cannot sample {n} transitions from {size}")
        return rng.choice(size, size=n, replace=False)

    def batch(self, idx) -> dict:
        return {
            "s": self.obs[idx], "a": self.act[idx], "r": self.r_hat[idx],
            "s_next": self.next_obs[idx], "done": self.done[idx],
        }

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        return self.batch(self.sample_indices(n, rng))

    def complete_episodes(self, min_len: int = 1) -> list:
        oldest = self.counter - self.capacity
        return [(s, n) for s, n in self.episodes if s >= oldest and n >= min_len]

    def sample_window(self, kind, h: int, rng: np.random.Generator) -> Segment:
        """A uniformly random length-``h`` window from a stored episode."""
        eps = self.complete_episodes(h)
        if not eps:
            raise ValueError(f"no stored episode has at least {h} steps")
        start, length = eps[rng.integers(len(eps))]
        offset = int(rng.integers(length - h + 1))
        idx = (np.arange(start + offset, start + offset + h)) % self.capacity
        return Segment(kind, self.states[idx].copy(), self.act[idx].copy(), float(self.true_r[idx].sum()))


def relabel_all(buffer: ReplayBuffer, reward_fn: Callable, chunk: int = 8192) -> None:
    """Overwrite every stored learned reward with ``reward_fn(s, a)``."""
    n = len(buffer)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        buffer.r_hat[lo:hi] = reward_fn(buffer.obs[lo:hi], buffer.act[lo:hi])


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-4
    alpha_ent: float = 0.1
    discount: float = 0.99
    tau: float = 0.005


@dataclass
class SacAgent:
    policy: ParamSet
    q1: ParamSet
    q2: ParamSet
    q1_targ: ParamSet
    q2_targ: ParamSet
    opt_policy: AdamState
    opt_q1: AdamState
    opt_q2: AdamState
    act_dim: int
    alpha_ent: float = 0.1
    discount: float = 0.99
    tau: float = 0.005

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, seed_seq: np.random.SeedSequence,
               config: SacConfig = SacConfig()) -> "SacAgent":
        pol_spec = MlpSpec((obs_dim, *config.hidden, 2 * act_dim), activation="relu")
        q_spec = MlpSpec((obs_dim + act_dim, *config.hidden, 1), activation="relu")
        s_pol, s_q1, s_q2 = seed_seq.spawn(3)
        policy = init_params(pol_spec, np.random.default_rng(s_pol))
        q1 = init_params(q_spec, np.random.default_rng(s_q1))
        q2 = init_params(q_spec, np.random.default_rng(s_q2))
        return cls(
            policy, q1, q2, q1.copy(), q2.copy(),
            AdamState.for_params(policy, config.lr),
            AdamState.for_params(q1, config.lr),
            AdamState.for_params(q2, config.lr),
            act_dim, config.alpha_ent, config.discount, config.tau,
        )


def policy_head(policy: ParamSet, obs):
    """Return ``(mu, log_std, raw_log_std, cache)`` for a batch of observations."""
    out, cache = forward_cached(policy, np.atleast_2d(obs))
    d = out.shape[1] // 2
    mu, raw = out[:, :d], out[:, d:]
    return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw, cache


def sample_action(policy: ParamSet, obs, mode: str = "stochastic",
                  rng: Optional[np.random.Generator] = None, return_logprob: bool = False):
    """Squashed action for one observation (or a batch of rows)."""
    single = np.ndim(obs) == 1
    mu, log_std, _, _ = policy_head(policy, obs)
    if mode == "mean":
        u = mu
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    a = np.clip(np.tanh(u), -ACTION_BOUND, ACTION_BOUND)
    if return_logprob:
        logp = tanh_gaussian_logprob(u, mu, log_std)
        return (a[0], float(logp[0])) if single else (a, logp)
    return a[0] if single else a


def _q_forward(q: ParamSet, s, a):
    return forward_cached(q, np.concatenate([s, a], axis=1))


def critic_targets(agent: SacAgent, batch: dict, eps_next: np.ndarray) -> np.ndarray:
    mu, log_std, _, _ = policy_head(agent.policy, batch["s_next"])
    u = mu + np.exp(log_std) * eps_next
    a_next = np.tanh(u)
    logp = tanh_gaussian_logprob(u, mu, log_std)
    q1t, _ = _q_forward(agent.q1_targ, batch["s_next"], a_next)
    q2t, _ = _q_forward(agent.q2_targ, batch["s_next"], a_next)
    v_next = np.minimum(q1t[:, 0], q2t[:, 0]) - agent.alpha_ent * logp
    not_done = 1.0 - batch["done"].astype(np.float64)
    return batch["r"] + agent.discount * not_done * v_next


def critic_loss_and_grads(q: ParamSet, batch: dict, targets: np.ndarray):
    qv, cache = _q_forward(q, batch["s"], batch["a"])
    err = qv[:, 0] - targets
    n = len(targets)
    grads, _ = backward_cached(q, cache, (2.0 * err / n)[:, None])
    return float(np.mean(err * err)), grads


def actor_loss_and_grads(
    agent: SacAgent,
    obs: np.ndarray,
    eps: np.ndarray,
    demo_obs: Optional[np.ndarray] = None,
    demo_act: Optional[np.ndarray] = None,
    bc_weight: float = 0.0,
):
    """SAC actor loss on ``obs`` plus ``bc_weight`` times the BC loss on demos.

    Returns ``(sac_loss, bc_loss, grads, mean_logp)``. Either part may be
    empty; the BC term regresses the squashed mean action onto expert actions.
    """
    n_rl = 0 if obs is None else len(obs)
    n_bc = 0 if demo_obs is None else len(demo_obs)
    if n_rl + n_bc == 0:
        raise ValueError("actor update needs at least one state")
    d = agent.act_dim
    parts = [x for x in (obs, demo_obs) if x is not None and len(x)]
    mu, log_std, raw, cache = policy_head(agent.policy, np.concatenate(parts, axis=0))
    upstream = np.zeros((n_rl + n_bc, 2 * d))

    sac_loss, mean_logp = 0.0, float("nan")
    if n_rl:
        m, ls = mu[:n_rl], log_std[:n_rl]
        std = np.exp(ls)
        u = m + std * eps
        a = np.tanh(u)
        logp = tanh_gaussian_logprob(u, m, ls)
        q1v, c1 = _q_forward(agent.q1, obs, a)
        q2v, c2 = _q_forward(agent.q2, obs, a)
        use1 = q1v[:, 0] <= q2v[:, 0]
        qmin = np.where(use1, q1v[:, 0], q2v[:, 0])
        sac_loss = float(np.mean(agent.alpha_ent * logp - qmin))
        mean_logp = float(logp.mean())
        # dL/da through the critic chosen by the min, per sample
        _, gin1 = backward_cached(agent.q1, c1, (use1 / n_rl)[:, None])
        _, gin2 = backward_cached(agent.q2, c2, (~use1 / n_rl)[:, None])
        dq_da = (gin1 + gin2)[:, -d:]
        dq_du = dq_da * (1.0 - a * a)
        # d logp/du = 2 tanh(u); d u/d mu = 1; d u/d log_std = std * eps
        dlogp_du = 2.0 * a
        alpha = agent.alpha_ent / n_rl
        g_u = alpha * dlogp_du - dq_du
        upstream[:n_rl, :d] = g_u
        upstream[:n_rl, d:] = (g_u * std * eps - alpha) * ((raw[:n_rl] >= LOG_STD_MIN) & (raw[:n_rl] <= LOG_STD_MAX))

    bc_loss = 0.0
    if n_bc:
        ta = np.tanh(mu[n_rl:])
        diff = ta - demo_act
        bc_loss = float(np.mean(np.sum(diff * diff, axis=1)))
        upstream[n_rl:, :d] = bc_weight * 2.0 * diff * (1.0 - ta * ta) / n_bc

    grads, _ = backward_cached(agent.policy, cache, upstream)
    return sac_loss, bc_loss, grads, mean_logp


@dataclass
class UpdateReport:
    critic1_loss: float
    critic2_loss: float
    actor_loss: float
    bc_loss: float
    mean_logp: float


def _check_finite(report: UpdateReport) -> None:
    for head, value in (("critic1", report.critic1_loss), ("critic2", report.critic2_loss),
                        ("actor", report.actor_loss), ("bc", report.bc_loss)):
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {head} loss: {value}")


def update(
    agent: SacAgent,
    batch: Optional[dict],
    rng: np.random.Generator,
    demo_obs: Optional[np.ndarray] = None,
    demo_act: Optional[np.ndarray] = None,
    bc_weight: float = 0.0,
) -> UpdateReport:
    """Critic step on ``batch``, actor step on SAC(batch) + bc_weight * BC(demos), target sync."""
    c1 = c2 = 0.0
    obs = eps = None
    if batch is not None and len(batch["r"]):
        n = len(batch["r"])
        eps_next = rng.standard_normal((n, agent.act_dim))
        eps = rng.standard_normal((n, agent.act_dim))
        targets = critic_targets(agent, batch, eps_next)
        c1, g1 = critic_loss_and_grads(agent.q1, batch, targets)
        c2, g2 = critic_loss_and_grads(agent.q2, batch, targets)
        if not (math.isfinite(c1) and math.isfinite(c2)):
            _check_finite(UpdateReport(c1, c2, 0.0, 0.0, 0.0))
        adam_step(agent.opt_q1, agent.q1, g1)
        adam_step(agent.opt_q2, agent.q2, g2)
        obs = batch["s"]
    actor, bc, grads, mean_logp = actor_loss_and_grads(agent, obs, eps, demo_obs, demo_act, bc_weight)
    report = UpdateReport(c1, c2, actor, bc, mean_logp)
    _check_finite(report)
    adam_step(agent.opt_policy, agent.policy, grads)
    soft_update(agent.q1_targ, agent.q1, agent.tau)
    soft_update(agent.q2_targ, agent.q2, agent.tau)
    return report


def sac_update(agent: SacAgent, batch: dict, rng: np.random.Generator) -> UpdateReport:
    if batch is None or len(batch["r"]) == 0:
        raise ValueError("sac_update needs a non-empty batch")
    return update(agent, batch, rng)


"""Bradley-Terry reward ensemble over segment pairs.

A reward network maps one ``obs || action`` row to a scalar. The predicted
probability that segment 0 is preferred is the logistic of the difference of
the two segments' summed rewards, and each pair is scored by the
cross-entropy against its (possibly soft) observed label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .envs import Segment
from .ndmath import AdamState, MlpSpec, ParamSet, backward_cached, forward_cached, init_params

N_MEMBERS = 3
PROB_CLAMP = 1e-12

Label = tuple[float, float]
PREFER0: Label = (1.0, 0.0)
PREFER1: Label = (0.0, 1.0)
INDIFFERENT: Label = (0.5, 0.5)


def is_strict(label: Optional[Label]) -> bool:
    return label == PREFER0 or label == PREFER1


@dataclass
class PreferencePair:
    seg0: Segment
    seg1: Segment
    label: Optional[Label]  # None when the annotator skipped
    clean_label: Label  # oracle label before corruption; metrics only
    uid: int = -1

    @property
    def skipped(self) -> bool:
        return self.label is None

    @property
    def is_clean(self) -> bool:
        return self.label == self.clean_label


@dataclass
class PairBatch:
    """Stacked arrays for a set of non-skipped pairs.

    ``x`` has shape ``(n, 2, H, d)``; ``y`` is ``(n, 2)``; ``clean`` flags
    whether the observed label equals the oracle label; ``ids`` are pair uids.
    """

    x: np.ndarray
    y: np.ndarray
    clean: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "PairBatch":
        idx = np.asarray(idx, dtype=np.intp)
        return PairBatch(self.x[idx], self.y[idx], self.clean[idx], self.ids[idx])

    @classmethod
    def from_pairs(cls, pairs: Sequence[PreferencePair]) -> "PairBatch":
        if any(p.skipped for p in pairs):
            raise ValueError("skipped pairs cannot be batched for training")
        if not pairs:
            raise ValueError("empty pair batch")
        x = np.stack([np.stack([p.seg0.inputs(), p.seg1.inputs()]) for p in pairs])
        y = np.array([p.label for p in pairs], dtype=np.float64)
        clean = np.array([p.is_clean for p in pairs])
        ids = np.array([p.uid for p in pairs], dtype=np.int64)
        return cls(x, y, clean, ids)


class PreferenceDataset:
    """Append-only store of every queried pair, skipped ones included."""

    def __init__(self):
        self.pairs: list[PreferencePair] = []
        self._batch: Optional[PairBatch] = None

    def __len__(self) -> int:
        return len(self.pairs)

    def add(self, pair: PreferencePair) -> PreferencePair:
        pair.uid = len(self.pairs)
        self.pairs.append(pair)
        self._batch = None
        return pair

    def trainable(self) -> list[PreferencePair]:
        return [p for p in self.pairs if not p.skipped]

    def batch(self) -> Optional[PairBatch]:
        """All non-skipped pairs as one stacked batch (cached)."""
        if self._batch is None:
            usable = self.trainable()
            self._batch = PairBatch.from_pairs(usable) if usable else None
        return self._batch

    def clean_ratio(self) -> float:
        usable = self.trainable()
        if not usable:
            return float("nan")
        return float(np.mean([p.is_clean for p in usable]))

    def strict_noise_rate(self) -> float:
        strict = [p for p in self.trainable() if is_strict(p.clean_label)]
        if not strict:
            return float("nan")
        return float(np.mean([not p.is_clean for p in strict]))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _margins_cached(params: ParamSet, x: np.ndarray):
    n, two, h, d = x.shape
    r, cache = forward_cached(params, x.reshape(n * two * h, d))
    sums = r.reshape(n, two, h).sum(axis=2)
    return sums[:, 0] - sums[:, 1], cache


def margins(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Summed-reward difference (segment 0 minus segment 1) for each pair."""
    return _margins_cached(params, x)[0]


def _ce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y[:, 0] * np.log(p) + y[:, 1] * np.log1p(-p))


def pair_losses(params: ParamSet, batch: PairBatch) -> np.ndarray:
    return _ce(sigmoid(margins(params, batch.x)), batch.y)


def pref_prob(params: ParamSet, pair: PreferencePair) -> float:
    """P[seg0 preferred over seg1] under one reward network."""
    x = np.stack([pair.seg0.inputs(), pair.seg1.inputs()])[None]
    return float(sigmoid(margins(params, x))[0])


def pair_loss(params: ParamSet, pair: PreferencePair) -> float:
    if pair.skipped:
        raise ValueError(f"pair {pair.uid} was skipped and has no label")
    p = pref_prob(params, pair)
    return float(_ce(np.array([p]), np.array([pair.label], dtype=np.float64))[0])


def mean_loss_and_grad(params: ParamSet, batch: PairBatch) -> tuple[float, ParamSet]:
    """Mean cross-entropy over the batch and its gradient."""
    n, _, h, _ = batch.x.shape
    m, cache = _margins_cached(params, batch.x)
    p = sigmoid(m)
    loss = float(_ce(p, batch.y).mean())
    # d loss_i / d margin_i = p_i - y_i(0), valid for soft labels since y sums to 1
    dm = (p - batch.y[:, 0]) / n
    upstream = np.empty((n, 2, h))
    upstream[:, 0, :] = dm[:, None]
    upstream[:, 1, :] = -dm[:, None]
    grads, _ = backward_cached(params, cache, upstream.reshape(-1, 1))
    return loss, grads


def reward_spec(input_dim: int, hidden: Sequence[int] = (64, 64, 64), output: str = "identity") -> MlpSpec:
    """Per-step reward net; ``output="tanh"`` bounds rewards to (-1, 1)."""
    return MlpSpec((input_dim, *hidden, 1), activation="tanh", output_activation=output)


@dataclass
class RewardEnsemble:
    members: list[ParamSet]
    optimizers: list[AdamState]
    perm_rngs: list[np.random.Generator] = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) != N_MEMBERS:
            raise ValueError(f"reward ensemble needs exactly {N_MEMBERS} members, got {len(self.members)}")
        specs = {m.spec for m in self.members}
        if len(specs) != 1:
            raise ValueError("ensemble members must share one architecture")

    @property
    def spec(self) -> MlpSpec:
        return self.members[0].spec

    @classmethod
    def create(
        cls,
        input_dim: int,
        seed_seq: np.random.SeedSequence,
        hidden: Sequence[int] = (64, 64, 64),
        lr: float = 3e-4,
        output: str = "identity",
    ) -> "RewardEnsemble":
        """Members get distinct init seeds and their own batch-permutation streams."""
        spec = reward_spec(input_dim, hidden, output)
        init_seqs = seed_seq.spawn(2 * N_MEMBERS)
        members = [init_params(spec, np.random.default_rng(s)) for s in init_seqs[:N_MEMBERS]]
        return cls(
            members,
            [AdamState.for_params(m, lr=lr) for m in members],
            [np.random.default_rng(s) for s in init_seqs[N_MEMBERS:]],
        )

    def member_rewards(self, obs, act) -> np.ndarray:
        """Per-member rewards, shape ``(3, n)`` (or ``(3,)`` for one row)."""
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(act)], axis=1)
        out = np.stack([forward_cached(m, x)[0][:, 0] for m in self.members])
        return out[:, 0] if np.ndim(obs) == 1 else out

    def __call__(self, obs, act):
        return ensemble_reward(self, obs, act)


def ensemble_reward(ensemble: RewardEnsemble, obs, act):
    """Mean of the three member rewards."""
    return ensemble.member_rewards(obs, act).mean(axis=0)

"""Small-loss sample selection and cyclic peer teaching across the ensemble.

Schedules are tuples of ``(student, teacher)`` member indices (0-based): the
teacher ranks its batch by per-pair loss, keeps the smallest ``ceil(rate * N)``
pairs, and the student takes one Adam step on that subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .ndmath import adam_step
from .reward import N_MEMBERS, PairBatch, PreferenceDataset, RewardEnsemble, mean_loss_and_grad, pair_losses

Schedule = tuple[tuple[int, int], ...]

# member 0 teaches 1, 1 teaches 2, 2 teaches 0
TRI_SCHEDULE: Schedule = ((1, 0), (2, 1), (0, 2))
SELF_SCHEDULE: Schedule = ((0, 0), (1, 1), (2, 2))
SCHEDULES = {"tri": TRI_SCHEDULE, "self": SELF_SCHEDULE}


def validate_schedule(schedule: Schedule) -> None:
    students = sorted(k for k, _ in schedule)
    teachers = sorted(j for _, j in schedule)
    if students != list(range(N_MEMBERS)) or teachers != list(range(N_MEMBERS)):
        raise ValueError(f"schedule must pair every member once as student and teacher: {schedule}")


def teacher_of(schedule: Schedule) -> dict[int, int]:
    return {k: j for k, j in schedule}


def selection_size(n: int, rate: float) -> int:
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"selection rate must be in (0, 1], got {rate}")
    # 1e-12 guards against float products like 0.6 * 5 = 3.0000000000000004
    return min(n, math.ceil(rate * n - 1e-12))


def select_small_loss(losses, rate: float) -> np.ndarray:
    """Indices of the ``ceil(rate * N)`` smallest losses, ties to lower index.

    Keeping exactly the m smallest values minimizes the subset mean among all
    subsets of size >= m, so this is the exact small-loss selection.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("losses must be a non-empty vector")
    m = selection_size(losses.size, rate)
    order = np.argsort(losses, kind="stable")
    return np.sort(order[:m])


def per_sample_losses(params, batch: PairBatch) -> np.ndarray:
    return pair_losses(params, batch)


@dataclass
class SelectionReport:
    """Outcome of one teaching step.

    ``selected[j]`` are indices into teacher ``j``'s batch; ``selected_ids[j]``
    the matching pair uids. ``clean_counts[j]`` uses hidden oracle labels.
    """

    selected: list[np.ndarray]
    selected_ids: list[np.ndarray]
    clean_counts: list[int]
    batch_sizes: list[int]
    gamma_rate: float
    schedule: Schedule
    student_losses: list[float]

    def clean_ratio(self, member: int) -> float:
        return self.clean_counts[member] / len(self.selected[member])


def teach_step(
    ensemble: RewardEnsemble,
    batches: Union[PairBatch, Sequence[PairBatch]],
    gamma_rate: float,
    schedule: Schedule = TRI_SCHEDULE,
) -> SelectionReport:
    """Select with every teacher on pre-update parameters, then update students.

    ``batches`` is either one batch shared by all teachers or one batch per
    member (member ``j``'s batch is what teacher ``j`` ranks).
    """
    validate_schedule(schedule)
    if isinstance(batches, PairBatch):
        batches = [batches] * N_MEMBERS
    if len(batches) != N_MEMBERS:
        raise ValueError(f"expected {N_MEMBERS} batches, got {len(batches)}")

    selected, ids, clean = [], [], []
    for j in range(N_MEMBERS):
        b = batches[j]
        if len(b) == 0:
            raise ValueError(f"teacher {j} received an empty batch")
        idx = select_small_loss(per_sample_losses(ensemble.members[j], b), gamma_rate)
        if idx.size == 0:
            raise ValueError(f"teacher {j} selected an empty subset")
        selected.append(idx)
        ids.append(b.ids[idx])
        clean.append(int(b.clean[idx].sum()))

    # all grads from pre-update parameters, then apply
    grads, losses = {}, [0.0] * N_MEMBERS
    for k, j in schedule:
        losses[k], grads[k] = mean_loss_and_grad(ensemble.members[k], batches[j].subset(selected[j]))
    for k, _ in schedule:
        adam_step(ensemble.optimizers[k], ensemble.members[k], grads[k])

    return SelectionReport(
        selected, ids, clean, [len(b) for b in batches], gamma_rate, tuple(schedule), losses
    )


def tri_teach_step(ensemble, batches, gamma_rate: float) -> SelectionReport:
    return teach_step(ensemble, batches, gamma_rate, TRI_SCHEDULE)


def self_teach_step(ensemble, batches, gamma_rate: float) -> SelectionReport:
    return teach_step(ensemble, batches, gamma_rate, SELF_SCHEDULE)


def reward_update_session(
    ensemble: RewardEnsemble,
    dataset: PreferenceDataset,
    gamma_rate: float,
    schedule: Schedule = TRI_SCHEDULE,
    epochs: int = 50,
    batch_size: int = 64,
    reselect: str = "minibatch",
    audit: list | None = None,
) -> list[SelectionReport]:
    """Run ``epochs`` passes over all non-skipped pairs.

    Each member shuffles the dataset with its own stream before mini-batching,
    so teachers rank different batches. With ``reselect="session"`` every
    teacher selects once over the whole dataset and training reuses that
    selection; otherwise selection is fresh per mini-batch.
    """
    if reselect not in ("minibatch", "session"):
        raise ValueError(f"unknown reselect mode {reselect!r}")
    full = dataset.batch()
    if full is None:
        return []
    if reselect == "session":
        keep = [select_small_loss(per_sample_losses(m, full), gamma_rate) for m in ensemble.members]
        pools = [full.subset(k) for k in keep]
        rate = 1.0
    else:
        pools = [full] * N_MEMBERS
        rate = gamma_rate

    reports = []
    for _ in range(epochs):
        orders = [ensemble.perm_rngs[j].permutation(len(pools[j])) for j in range(N_MEMBERS)]
        n_batches = max(math.ceil(len(pool) / batch_size) for pool in pools)
        for b in range(n_batches):
            batches = []
            for j in range(N_MEMBERS):
                chunk = orders[j][b * batch_size:(b + 1) * batch_size]
                if chunk.size == 0:  # uneven pools in session mode
                    chunk = orders[j][-batch_size:]
                batches.append(pools[j].subset(chunk))
            if audit is not None:
                audit.extend(batch.ids.copy() for batch in batches)
            report = teach_step(ensemble, batches, rate, schedule)
            if reselect == "session":
                report.gamma_rate = gamma_rate
            reports.append(report)
    return reports

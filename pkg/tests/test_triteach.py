import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trend.ndmath import AdamState, adam_step
from trend.envs import EnvKind, Segment
from trend.reward import (
    PREFER0,
    PREFER1,
    PairBatch,
    PreferenceDataset,
    PreferencePair,
    RewardEnsemble,
    mean_loss_and_grad,
    pair_losses,
)
from trend.triteach import (
    SELF_SCHEDULE,
    TRI_SCHEDULE,
    reward_update_session,
    select_small_loss,
    selection_size,
    teach_step,
    teacher_of,
    validate_schedule,
)


def brute_force_select(losses, gamma):
    """Exhaustive argmin of the subset mean over subsets of size >= ceil(gamma * N).

    Ties go to the smaller subset, then to the lexicographically smallest indices.
    """
    n = len(losses)
    m = math.ceil(Fraction(str(gamma)) * n)
    best = None
    for size in range(m, n + 1):
        for sub in itertools.combinations(range(n), size):
            key = (Fraction(sum(Fraction(losses[i]) for i in sub), size), size, sub)
            if best is None or key < best:
                best = key
    return np.array(best[2])


def make_ensemble(seed=0, hidden=(8,), d=4):
    return RewardEnsemble.create(d, np.random.SeedSequence(seed), hidden=hidden, lr=1e-2)


def make_batch(rng, n=12, h=4, d=4, noisy_every=3):
    x = rng.normal(size=(n, 2, h, d))
    clean_y = np.array([PREFER0 if i % 2 else PREFER1 for i in range(n)], dtype=float)
    y = clean_y.copy()
    clean = np.ones(n, dtype=bool)
    y[::noisy_every] = y[::noisy_every, ::-1]
    clean[::noisy_every] = False
    return PairBatch(x, y, clean, np.arange(100, 100 + n))


@pytest.mark.parametrize("gamma", [0.3, 0.5, 0.6, 1.0])
def test_selection_matches_exhaustive_oracle(gamma):
    rng = np.random.default_rng(0)
    for n in range(1, 10):
        for _ in range(3):
            losses = rng.exponential(size=n)
            assert np.array_equal(select_small_loss(losses, gamma), brute_force_select(losses, gamma))
            ties = rng.integers(0, 3, size=n).astype(float)
            assert np.array_equal(select_small_loss(ties, gamma), brute_force_select(ties, gamma))


def test_selection_sizes():
    assert selection_size(10, 0.6) == 6
    assert selection_size(5, 0.6) == 3
    assert selection_size(7, 0.6) == 5
    assert selection_size(1, 0.3) == 1
    assert selection_size(64, 1.0) == 64
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            selection_size(10, bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=40), st.sampled_from([0.3, 0.5, 0.6, 1.0]))
def test_selected_losses_never_exceed_rejected(losses, gamma):
    idx = select_small_loss(losses, gamma)
    rest = np.setdiff1d(np.arange(len(losses)), idx)
    losses = np.asarray(losses)
    assert len(idx) == selection_size(len(losses), gamma)
    if rest.size:
        assert losses[idx].max() <= losses[rest].min()


def test_full_rate_keeps_everything():
    assert np.array_equal(select_small_loss([3.0, 1.0, 2.0], 1.0), [0, 1, 2])


def test_tri_schedule_is_a_three_cycle():
    t = teacher_of(TRI_SCHEDULE)
    assert all(t[k] != k for k in range(3))
    for k in range(3):
        assert t[t[t[k]]] == k
    validate_schedule(TRI_SCHEDULE)
    validate_schedule(SELF_SCHEDULE)
    with pytest.raises(ValueError):
        validate_schedule(((1, 0), (2, 0), (0, 2)))


def expected_student_params(ensemble, batches, gamma, schedule):
    """Reference update built from copies taken before the step."""
    before = [m.copy() for m in ensemble.members]
    opts = [AdamState(o.m.copy(), o.v.copy(), o.t, o.lr) for o in ensemble.optimizers]
    out = {}
    for k, j in schedule:
        sel = select_small_loss(pair_losses(before[j], batches[j]), gamma)
        _, g = mean_loss_and_grad(before[k], batches[j].subset(sel))
        p = before[k].copy()
        adam_step(opts[k], p, g)
        out[k] = p
    return out


@pytest.mark.parametrize("schedule", [TRI_SCHEDULE, SELF_SCHEDULE])
def test_student_learns_from_its_teachers_selection(schedule, rng):
    ens = make_ensemble()
    batches = [make_batch(rng) for _ in range(3)]
    expected = expected_student_params(ens, batches, 0.6, schedule)
    report = teach_step(ens, batches, 0.6, schedule)
    for k in range(3):
        assert np.array_equal(ens.members[k].flat(), expected[k].flat())
    for j in range(3):
        assert np.array_equal(report.selected_ids[j], batches[j].ids[report.selected[j]])
        assert report.clean_counts[j] == int(batches[j].clean[report.selected[j]].sum())


def test_identical_members_make_tri_and_self_coincide(rng):
    batch = make_batch(rng)
    a, b = make_ensemble(), make_ensemble()
    for ens in (a, b):
        for k in (1, 2):
            ens.members[k] = ens.members[0].copy()
    teach_step(a, batch, 0.6, TRI_SCHEDULE)
    teach_step(b, batch, 0.6, SELF_SCHEDULE)
    for m, n in zip(a.members, b.members):
        assert np.array_equal(m.flat(), n.flat())


def test_clean_labels_never_influence_updates(rng):
    batch = make_batch(rng)
    flipped = PairBatch(batch.x, batch.y, ~batch.clean, batch.ids)
    a, b = make_ensemble(), make_ensemble()
    for _ in range(3):
        teach_step(a, batch, 0.6)
        teach_step(b, flipped, 0.6)
    for m, n in zip(a.members, b.members):
        assert np.array_equal(m.flat(), n.flat())


def test_full_rate_self_teaching_is_plain_cross_entropy(rng):
    batch = make_batch(rng)
    ens = make_ensemble()
    ref = [m.copy() for m in ens.members]
    opts = [AdamState.for_params(m, lr=1e-2) for m in ref]
    teach_step(ens, batch, 1.0, SELF_SCHEDULE)
    for k in range(3):
        _, g = mean_loss_and_grad(ref[k], batch)
        adam_step(opts[k], ref[k], g)
        assert np.array_equal(ens.members[k].flat(), ref[k].flat())


def test_small_loss_selection_prefers_clean_pairs(rng):
    # a member that already agrees with the clean labels ranks the noisy ones last
    x = rng.normal(size=(30, 2, 3, 4))
    score = x[:, 0, :, 0].sum(1) - x[:, 1, :, 0].sum(1)
    clean_y = np.where(score[:, None] > 0, [PREFER0], [PREFER1]).astype(float)
    y = clean_y.copy()
    y[:10] = y[:10, ::-1]
    batch = PairBatch(x, y, np.arange(30) >= 10, np.arange(30))
    ens = make_ensemble()
    w = ens.members[0]
    w.weights[0][:] = 0.0
    w.weights[0][:, 0] = 1.0
    w.weights[1][:] = 1.0
    w.biases[0][:] = 0.0
    w.biases[1][:] = 0.0
    report = teach_step(ens, batch, 0.6, SELF_SCHEDULE)
    assert report.clean_counts[0] == len(report.selected[0]) == 18


def _dataset(rng, n, skip_every=0):
    ds = PreferenceDataset()
    for i in range(n):
        s = [Segment(EnvKind.POINT_REACH, rng.normal(size=(5, 4)), rng.uniform(-1, 1, (5, 2)), 0.0)
             for _ in range(2)]
        label = None if skip_every and i % skip_every == 0 else (PREFER0 if i % 2 else PREFER1)
        ds.add(PreferencePair(s[0], s[1], label, PREFER0))
    return ds


def test_session_batches_cover_dataset_and_skip_abstentions(rng):
    ds = _dataset(rng, 25, skip_every=4)
    ens = make_ensemble()
    audit = []
    reports = reward_update_session(ens, ds, 0.6, TRI_SCHEDULE, epochs=2, batch_size=8, audit=audit)
    usable = {p.uid for p in ds.trainable()}
    assert len(reports) == 2 * math.ceil(len(usable) / 8)
    seen = set()
    for ids in audit:
        seen.update(ids.tolist())
    assert seen == usable
    # each member covers every usable pair exactly once per epoch
    per_member_epoch0 = [np.concatenate(audit[j:len(audit) // 2:3]) for j in range(3)]
    for ids in per_member_epoch0:
        assert sorted(ids.tolist()) == sorted(usable)


def test_members_see_different_batch_orders(rng):
    ds = _dataset(rng, 30)
    audit = []
    reward_update_session(make_ensemble(), ds, 0.6, TRI_SCHEDULE, epochs=1, batch_size=10, audit=audit)
    assert not np.array_equal(audit[0], audit[1])


def test_session_reselection_mode(rng):
    ds = _dataset(rng, 20)
    reports = reward_update_session(make_ensemble(), ds, 0.5, TRI_SCHEDULE, epochs=1, batch_size=64,
                                    reselect="session")
    assert len(reports) == 1
    assert all(len(s) == 10 for s in reports[0].selected)


def test_session_on_empty_dataset_is_a_no_op():
    assert reward_update_session(make_ensemble(), PreferenceDataset(), 0.6) == []

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trend.envs import EnvKind, Segment
from trend.ndmath import MlpSpec, ParamSet, init_params, mlp_forward
from trend.reward import (
    INDIFFERENT,
    PREFER0,
    PREFER1,
    PairBatch,
    PreferenceDataset,
    PreferencePair,
    RewardEnsemble,
    ensemble_reward,
    margins,
    mean_loss_and_grad,
    pair_loss,
    pair_losses,
    pref_prob,
    reward_spec,
    sigmoid,
)


def linear_net(w, b=0.0):
    spec = MlpSpec((len(w), 1), activation="tanh", output_activation="identity")
    return ParamSet(spec, [np.array([w], dtype=float)], [np.array([b], dtype=float)])


def random_batch(rng, n=6, h=5, d=4):
    x = rng.normal(size=(n, 2, h, d))
    y = np.array([PREFER0, PREFER1, INDIFFERENT] * n, dtype=float)[:n]
    return PairBatch(x, y, np.ones(n, dtype=bool), np.arange(n))


def loop_prob(params, x_pair):
    """Reference: per-row forward passes, summed, then the logistic."""
    s0 = sum(float(mlp_forward(params, row)[0]) for row in x_pair[0])
    s1 = sum(float(mlp_forward(params, row)[0]) for row in x_pair[1])
    return 1.0 / (1.0 + math.exp(-(s0 - s1)))


def test_unit_margin_probability():
    net = linear_net([1.0, 0.0])
    x = np.array([[[[1.0, 0.0]], [[0.0, 0.0]]]])  # one-step segments, margin 1
    assert float(sigmoid(margins(net, x))[0]) == pytest.approx(0.731059, abs=1e-6)


def test_zero_margin_is_exactly_half():
    net = linear_net([0.3, -0.2], b=0.7)
    x = np.zeros((1, 2, 3, 2))
    assert float(sigmoid(margins(net, x))[0]) == 0.5


def test_probabilities_of_both_orders_sum_to_one(rng):
    params = init_params(reward_spec(4, (8, 8)), rng)
    x = rng.normal(scale=3.0, size=(10_000, 2, 2, 4))
    p = sigmoid(margins(params, x))
    q = sigmoid(margins(params, x[:, ::-1]))
    assert np.max(np.abs(p + q - 1.0)) < 1e-12


def test_sigmoid_extremes_are_finite():
    z = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_batched_probability_matches_loop_reference(rng):
    params = init_params(reward_spec(3, (5, 5)), rng)
    x = rng.normal(size=(4, 2, 6, 3))
    p = sigmoid(margins(params, x))
    for i in range(4):
        assert p[i] == pytest.approx(loop_prob(params, x[i]), abs=1e-12)


def test_constant_reward_shift_leaves_probability_unchanged(rng):
    params = init_params(reward_spec(3, (6,)), rng)
    shifted = params.copy()
    shifted.biases[-1] += 2.5
    x = rng.normal(size=(50, 2, 7, 3))
    assert np.allclose(margins(params, x), margins(shifted, x), atol=1e-9)


def test_higher_reward_segment_is_more_preferred(rng):
    net = linear_net([1.0, 0.0])
    x = rng.normal(size=(1, 2, 4, 2))
    base = sigmoid(margins(net, x))[0]
    x[0, 0, :, 0] += 0.1
    assert sigmoid(margins(net, x))[0] > base


def test_flipped_label_losses_are_complementary(rng):
    params = init_params(reward_spec(4, (8,)), rng)
    b = random_batch(rng, n=6)
    strict = np.array([PREFER0] * 6, dtype=float)
    l0 = pair_losses(params, PairBatch(b.x, strict, b.clean, b.ids))
    l1 = pair_losses(params, PairBatch(b.x, strict[:, ::-1].copy(), b.clean, b.ids))
    assert np.allclose(np.exp(-l0) + np.exp(-l1), 1.0, atol=1e-12)


def test_indifferent_loss_is_minimized_at_even_odds():
    net = linear_net([0.0, 0.0])
    x = np.zeros((1, 2, 3, 2))
    b = PairBatch(x, np.array([INDIFFERENT]), np.ones(1, dtype=bool), np.zeros(1, dtype=int))
    assert pair_losses(net, b)[0] == pytest.approx(math.log(2.0))


def test_loss_is_clamped_not_infinite():
    net = linear_net([1.0])
    x = np.array([[[[1e6]], [[0.0]]]])
    b = PairBatch(x, np.array([PREFER1]), np.ones(1, dtype=bool), np.zeros(1, dtype=int))
    loss = pair_losses(net, b)[0]
    assert np.isfinite(loss) and loss == pytest.approx(-math.log(1e-12))


def test_mean_loss_gradient_matches_finite_differences(rng):
    params = init_params(reward_spec(4, (6, 5)), rng)
    batch = random_batch(rng, n=5, h=3)
    _, grads = mean_loss_and_grad(params, batch)
    eps = 1e-6
    for layer in range(params.spec.n_layers):
        w = params.weights[layer]
        for idx in [(0, 0), (w.shape[0] - 1, w.shape[1] - 1)]:
            orig = w[idx]
            w[idx] = orig + eps
            up = pair_losses(params, batch).mean()
            w[idx] = orig - eps
            down = pair_losses(params, batch).mean()
            w[idx] = orig
            fd = (up - down) / (2 * eps)
            assert grads.weights[layer][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_single_pair_helpers_agree(a, b):
    # the first point_reach feature is goal_x - pos_x, so these rows score a and b
    seg0 = Segment(EnvKind.POINT_REACH, np.array([[0.0, 0.0, a, 0.0]]), np.zeros((1, 2)), 0.0)
    seg1 = Segment(EnvKind.POINT_REACH, np.array([[0.0, 0.0, b, 0.0]]), np.zeros((1, 2)), 0.0)
    pair = PreferencePair(seg0, seg1, PREFER0, PREFER0)
    net = linear_net([1.0, 0.0, 0.0, 0.0])
    p = pref_prob(net, pair)
    assert p == pytest.approx(1.0 / (1.0 + math.exp(b - a)), abs=1e-12)
    assert pair_loss(net, pair) == pytest.approx(-math.log(min(max(p, 1e-12), 1 - 1e-12)), abs=1e-9)


def test_skipped_pair_has_no_loss(make_segment, rng):
    s0, s1 = make_segment(rng), make_segment(rng)
    pair = PreferencePair(s0, s1, None, PREFER0)
    params = init_params(reward_spec(4, (4,)), rng)
    with pytest.raises(ValueError):
        pair_loss(params, pair)
    with pytest.raises(ValueError):
        PairBatch.from_pairs([pair])


def test_dataset_excludes_skipped_pairs(make_segment, rng):
    ds = PreferenceDataset()
    for label in (PREFER0, None, PREFER1, None):
        ds.add(PreferencePair(make_segment(rng), make_segment(rng), label, PREFER0))
    assert len(ds) == 4
    assert list(ds.batch().ids) == [0, 2]
    assert ds.clean_ratio() == 0.5


def test_ensemble_reward_is_member_mean(rng):
    ens = RewardEnsemble.create(4, np.random.SeedSequence(3), hidden=(8, 8))
    obs, act = rng.normal(size=(10, 2)), rng.uniform(-1, 1, size=(10, 2))
    per = ens.member_rewards(obs, act)
    assert per.shape == (3, 10)
    assert np.allclose(ensemble_reward(ens, obs, act), per.mean(axis=0), atol=1e-15)
    assert ens(obs[0], act[0]) == pytest.approx(per[:, 0].mean())


def test_ensemble_members_differ_and_are_reproducible():
    a = RewardEnsemble.create(4, np.random.SeedSequence(7), hidden=(8,))
    b = RewardEnsemble.create(4, np.random.SeedSequence(7), hidden=(8,))
    assert not np.array_equal(a.members[0].weights[0], a.members[1].weights[0])
    for m, n in zip(a.members, b.members):
        assert np.array_equal(m.flat(), n.flat())


def test_ensemble_requires_three_members(rng):
    p = init_params(reward_spec(4, (4,)), rng)
    with pytest.raises(ValueError):
        RewardEnsemble([p, p], [None, None])


def test_bounded_output_option(rng):
    ens = RewardEnsemble.create(4, np.random.SeedSequence(1), hidden=(8,), output="tanh")
    r = ens.member_rewards(rng.normal(scale=100, size=(50, 2)), rng.uniform(-1, 1, (50, 2)))
    assert np.all(np.abs(r) <= 1.0)

import numpy as np
import pytest

from trend.envs import EnvKind, Segment, rollout


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_segment():
    """Factory for windows of random-action episodes, with their true returns."""

    def make(rng, kind=EnvKind.POINT_REACH, h=50):
        states, act, rew, _ = rollout(kind, lambda s, o: rng.uniform(-1, 1, 2), int(rng.integers(2**31)),
                                      stop_on_success=False)
        start = int(rng.integers(len(act) - h + 1))
        return Segment(kind, states[start:start + h], act[start:start + h], float(rew[start:start + h].sum()))

    return make

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icr.ergodic import TwoStateChain


def test_stationary_law():
    chain = TwoStateChain(0.2, 0.3)
    assert chain.stationary == pytest.approx([0.6, 0.4])
    assert chain.expectation([1.0, 5.0]) == pytest.approx(2.6)


def test_invalid():
    with pytest.raises(ValueError):
        TwoStateChain(0.0, 0.5)


def test_deterministic_sampling():
    chain = TwoStateChain(0.1, 0.4)
    assert np.array_equal(chain.sample(500, 3), chain.sample(500, 3))


def test_deterministic_chain_alternates():
    assert TwoStateChain(1.0, 1.0).sample(6, 0).tolist() == [1, 0, 1, 0, 1, 0]


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(0, 2**31))
def test_empirical_frequency_near_stationary(a, b, seed):
    chain = TwoStateChain(a, b)
    freq = chain.sample(20_000, seed).mean()
    assert abs(freq - chain.stationary[1]) < 0.05

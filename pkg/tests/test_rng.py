import numpy as np
import pytest

from tve.rng import stream


def test_same_key_same_draws():
    assert np.array_equal(stream(5, "a", 3).random(8), stream(5, "a", 3).random(8))


@pytest.mark.parametrize("other", [(6, "a", 3), (5, "b", 3), (5, "a", 4), (5, "a")])
def test_different_keys_differ(other):
    assert not np.array_equal(stream(5, "a", 3).random(8), stream(*other).random(8))


def test_negative_key_rejected():
    with pytest.raises(ValueError):
        stream(0, -1)

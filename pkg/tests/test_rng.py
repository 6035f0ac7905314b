import numpy as np

from fedgcdr.rng import substream


def test_same_path_same_stream():
    a = substream(7, "x", 3).random(5)
    b = substream(7, "x", 3).random(5)
    assert np.array_equal(a, b)


def test_distinct_paths_and_seeds_differ():
    base = substream(7, "x", 3).random(5)
    assert not np.array_equal(base, substream(7, "x", 4).random(5))
    assert not np.array_equal(base, substream(7, "y", 3).random(5))
    assert not np.array_equal(base, substream(8, "x", 3).random(5))

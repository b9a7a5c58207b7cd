import numpy as np
import pytest

from pixelfuse.rng import SeededStream, seeded_stream


def test_same_seed_same_normals():
    a = seeded_stream(42).normal(1000)
    b = seeded_stream(42).normal(1000)
    assert np.array_equal(a, b)


def test_normal_moments_million_draws():
    z = SeededStream(7).normal(10**6)
    assert abs(z.mean()) <= 0.01
    assert abs(z.std() - 1.0) <= 0.01


def test_different_seeds_differ():
    assert SeededStream(0).normal() != SeededStream(1).normal()


def test_split_children_are_distinct_and_reproducible():
    a1, a2 = SeededStream(5).split(2)
    b1, _ = SeededStream(5).split(2)
    assert np.array_equal(a1.uniform(10), b1.uniform(10))
    assert not np.array_equal(SeededStream(5).split(2)[0].uniform(10), a2.uniform(10))


def test_uniform_range_and_index_draws():
    s = SeededStream(3)
    u = s.uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    idx = s.sample_without_replacement(16, 8)
    assert len(set(idx.tolist())) == 8 and idx.max() < 16
    assert all(0 <= s.integers(5) < 5 for _ in range(100))


def test_keyed_streams_ignore_consumption():
    a, b = SeededStream(3), SeededStream(3)
    b.uniform(100)
    assert a.keyed(5, 2).uniform(4).tolist() == b.keyed(5, 2).uniform(4).tolist()
    assert a.keyed(5, 2).uniform() != a.keyed(2, 5).uniform()
    assert a.keyed(0).uniform() != a.split(1)[0].uniform()
    assert a.split(2)[1].keyed(1).uniform() != a.split(2)[0].keyed(1).uniform()
    with pytest.raises(ValueError):
        a.keyed(-1)

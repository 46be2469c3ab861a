from collections import Counter

import pytest
from scipy.stats import chisquare

from popcorn.rng import Rng, as_rng


def test_seeded_streams_repeat():
    assert Rng(5).randbytes(64) == Rng(5).randbytes(64)
    assert Rng(5).randbytes(32) != Rng(6).randbytes(32)
    assert Rng(None).randbytes(16) != Rng(None).randbytes(16)


def test_children_are_independent_of_siblings():
    root = Rng(1)
    a = root.child("relu").randbits(64)
    root2 = Rng(1)
    root2.child("other").randbits(64)
    assert root2.child("relu").randbits(64) == a
    assert Rng(1).child("x").randbits(64) != Rng(1).child("y").randbits(64)


def test_ranges():
    r = Rng(2)
    vals = [r.randint(-3, 3) for _ in range(2000)]
    assert set(vals) == set(range(-3, 4))
    assert all(0 <= r.random() < 1 for _ in range(100))
    with pytest.raises(ValueError):
        r.randbelow(0)


def test_permutation_is_bijection():
    for seed in range(50):
        p = Rng(seed).permutation(17)
        assert sorted(p) == list(range(17))


def test_permutation_uniform_destinations():
    n, runs = 6, 10000
    counts = Counter()
    for seed in range(runs):
        p = Rng(seed, "chi").permutation(n)
        counts[(0, p.index(0))] += 1
        counts[(3, p.index(3))] += 1
    for src in (0, 3):
        obs = [counts[(src, d)] for d in range(n)]
        assert chisquare(obs).pvalue > 0.001


def test_as_rng():
    r = Rng(1)
    assert as_rng(r) is r
    assert as_rng(4).randbits(32) == Rng(4).randbits(32)

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dectrack.assignment import gated_assignment, min_cost_assignment


def brute_min_cost(c: np.ndarray) -> float:
    """Exhaustive minimum over every one-to-one assignment covering the smaller side."""
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return brute_min_cost(c.T)


def brute_gated_cost(c: np.ndarray, theta: float) -> float:
    """Exhaustive optimum of the square padding: each empty slot costs ``theta``."""
    n, m = c.shape
    best = max(n, m) * theta
    for k in range(1, min(n, m) + 1):
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.permutations(range(m), k):
                cost = sum(c[r, q] for r, q in zip(rows, cols)) + (max(n, m) - k) * theta
                best = min(best, cost)
    return best


def gated_cost(c, pairs, theta):
    n, m = c.shape
    return sum(c[r, q] for r, q in pairs) + (max(n, m) - len(pairs)) * theta


def test_examples():
    D = np.array([[1.0, 2.0], [2.0, 1.0]])
    assert gated_assignment(D, 10) == [(0, 0), (1, 1)]
    assert gated_assignment(D, 0.5) == []
    assert min_cost_assignment(np.zeros((0, 3))) == []
    assert gated_assignment(np.zeros((0, 3)), 1.0) == []


@settings(max_examples=300)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_rectangular_hungarian_matches_brute_force(n, m, seed):
    c = np.random.default_rng(seed).uniform(0, 10, (n, m))
    pairs = min_cost_assignment(c)
    assert len(pairs) == min(n, m)
    assert len({r for r, _ in pairs}) == len({q for _, q in pairs}) == len(pairs)
    assert sum(c[r, q] for r, q in pairs) == pytest.approx(brute_min_cost(c), abs=1e-9)


@settings(max_examples=200)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(0.1, 3), st.integers(0, 2**32 - 1))
def test_gated_assignment_is_optimal_with_break_even_dummies(n, m, theta, seed):
    c = np.random.default_rng(seed).uniform(0, 3, (n, m))
    pairs = gated_assignment(c, theta)
    assert all(c[r, q] <= theta for r, q in pairs)
    assert gated_cost(c, pairs, theta) == pytest.approx(brute_gated_cost(c, theta), abs=1e-9)


def test_summed_distance_optimum_maximises_similarity_product(rng):
    gamma = 5.0
    for _ in range(100):
        n, m = (int(v) for v in rng.integers(1, 7, 2))
        D = rng.uniform(0, 2, (n, m))
        pairs = min_cost_assignment(D)
        prod = math.prod(math.exp(-gamma * D[r, q]) for r, q in pairs)
        if n <= m:
            best = max(math.prod(math.exp(-gamma * D[i, p[i]]) for i in range(n))
                       for p in itertools.permutations(range(m), n))
        else:
            best = max(math.prod(math.exp(-gamma * D[p[j], j]) for j in range(m))
                       for p in itertools.permutations(range(n), m))
        assert prod == pytest.approx(best, rel=1e-9)


def test_raising_the_gate_can_swap_out_a_retained_pair():
    # dummy padding at the threshold: a looser gate makes the anti-diagonal cheaper
    D = np.array([[1.0, 1.5], [1.5, 100.0]])
    assert gated_assignment(D, 1.8) == [(0, 0)]
    assert gated_assignment(D, 3.0) == [(0, 1), (1, 0)]


@settings(max_examples=300)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1),
       st.lists(st.floats(0.01, 3), min_size=2, max_size=5))
def test_raising_the_gate_never_shrinks_the_match_count(n, m, seed, thetas):
    c = np.random.default_rng(seed).uniform(0, 3, (n, m))
    counts = [len(gated_assignment(c, t)) for t in sorted(thetas)]
    assert counts == sorted(counts)

import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dectrack.core import Keypoint, TorsoKeypoints
from dectrack.orientation import (
    AllOccluded,
    BinBoundaries,
    DegenerateTorso,
    TooFewSamples,
    bin_index,
    detection_bin,
    fit_bins,
    kmeans_1d,
    s2t_ratio,
    try_s2t_ratio,
    uniform_bins,
)

from helpers import FACING_AWAY, kp


def brute_kmeans_sse(values, k):
    """Smallest within-cluster SSE over every contiguous partition of the sorted values."""
    x = np.sort(np.asarray(values, dtype=float))
    best = math.inf
    for cuts in itertools.combinations(range(1, len(x)), k - 1):
        parts = np.split(x, cuts)
        best = min(best, sum(float(((p - p.mean()) ** 2).sum()) for p in parts))
    return best


def assigned_sse(values, centres):
    x = np.asarray(values, dtype=float)
    return float(((x[:, None] - centres[None, :]) ** 2).min(axis=1).sum())


# s2t ---------------------------------------------------------------------

def test_worked_example_ratio():
    assert s2t_ratio(FACING_AWAY).value == pytest.approx(0.36, abs=1e-12)


def test_mirrored_example_is_negative():
    mirrored = kp((40, 20, 1), (60, 20, 1), (42, 70, 1), (58, 70, 1))
    assert s2t_ratio(mirrored).value == pytest.approx(-0.36, abs=1e-12)


def test_all_occluded():
    with pytest.raises(AllOccluded):
        s2t_ratio(kp((60, 20, 0), (40, 20, 0), (58, 70, 0), (42, 70, 0)))
    assert try_s2t_ratio(kp((60, 20, 0), (40, 20, 0), (58, 70, 0), (42, 70, 0))) is None


def test_degenerate_torso():
    flat = kp((60, 20, 1), (40, 20, 1), (58, 20, 1), (42, 20, 1))
    with pytest.raises(DegenerateTorso):
        s2t_ratio(flat)
    assert try_s2t_ratio(flat) is None


coord = st.floats(-500, 500, allow_nan=False)
conf = st.floats(0.05, 1.0)


@st.composite
def torsos(draw):
    pts = [Keypoint(draw(coord), draw(coord), draw(conf)) for _ in range(4)]
    k = TorsoKeypoints(*pts)
    r = try_s2t_ratio(k)
    # keep torsos whose length is comfortably non-degenerate
    rs, ls, rh, lh = k
    total = sum(p.c for p in k)
    p_h = ((rs.c + rh.c) * (rh.y - rs.y) + (ls.c + lh.c) * (lh.y - ls.y)) / total
    assume(r is not None and abs(p_h) > 1.0)
    return k


def _map(k, fx=lambda x: x, fy=lambda y: y, fc=lambda c: c):
    return TorsoKeypoints(*(Keypoint(fx(p.x), fy(p.y), fc(p.c)) for p in k))


def _close(a, b):
    return abs(a - b) <= 1e-9 * max(1.0, abs(a), abs(b))


@settings(max_examples=300)
@given(torsos(), st.floats(-1000, 1000))
def test_reflection_negates(k, axis):
    r = s2t_ratio(k).value
    assert _close(s2t_ratio(_map(k, fx=lambda x: 2 * axis - x)).value, -r)


@settings(max_examples=300)
@given(torsos(), st.floats(-1000, 1000), st.floats(-1000, 1000))
def test_translation_invariant(k, dx, dy):
    r = s2t_ratio(k).value
    assert _close(s2t_ratio(_map(k, fx=lambda x: x + dx, fy=lambda y: y + dy)).value, r)


@settings(max_examples=300)
@given(torsos(), st.floats(0.01, 100))
def test_scale_invariant(k, s):
    r = s2t_ratio(k).value
    assert _close(s2t_ratio(_map(k, fx=lambda x: s * x, fy=lambda y: s * y)).value, r)


@settings(max_examples=300)
@given(torsos(), st.floats(0.01, 1.0))
def test_confidence_scale_invariant(k, s):
    r = s2t_ratio(k).value
    assert _close(s2t_ratio(_map(k, fc=lambda c: c * s)).value, r)


# bins --------------------------------------------------------------------

def test_uniform_two_bins():
    assert uniform_bins(2).edges == (-math.inf, 0.0, math.inf)
    assert fit_bins([], 2, "uniform").edges == (-math.inf, 0.0, math.inf)


def test_kmeans_two_point_symmetry():
    assert fit_bins([-0.5, 0.5], 2, "kmeans").interior == (0.0,)


def test_kmeans_six_points_three_bins():
    ratios = [-0.9, -0.8, 0.1, 0.2, 0.8, 0.9]
    b = fit_bins(ratios, 3, "kmeans")
    assert b.interior == pytest.approx((-0.35, 0.5), abs=1e-12)
    centres = kmeans_1d(ratios, 3)
    assert assigned_sse(ratios, centres) == pytest.approx(brute_kmeans_sse(ratios, 3), abs=1e-12)


@settings(max_examples=200)
@given(st.lists(st.floats(-2, 2, allow_nan=False).map(lambda v: round(v, 2)),
                min_size=1, max_size=9), st.integers(1, 5))
def test_kmeans_matches_exhaustive_partition(values, k):
    assume(len(set(values)) >= k)
    centres = kmeans_1d(values, k)
    assert np.all(np.diff(centres) > 0)
    assert assigned_sse(values, centres) <= brute_kmeans_sse(values, k) + 1e-9


def test_kmeans_needs_enough_distinct_values():
    with pytest.raises(TooFewSamples):
        kmeans_1d([0.1, 0.1, 0.1], 2)
    with pytest.raises(TooFewSamples):
        fit_bins([], 1, "kmeans")


def test_kmeans_single_bin_has_no_interior_edge():
    assert fit_bins([0.3, 0.4], 1, "kmeans").L == 1


def test_bin_index_examples():
    b = uniform_bins(2)
    assert bin_index(0.36, b) == 1
    assert bin_index(-0.36, b) == 0
    # half-open: an edge value belongs to the bin on its right
    assert bin_index(0.0, b) == 1
    b3 = BinBoundaries.from_interior((-0.35, 0.5))
    assert [bin_index(v, b3) for v in (-0.35, 0.5)] == [1, 2]


def test_bin_index_rejects_non_finite():
    with pytest.raises(ValueError):
        bin_index(math.nan, uniform_bins(3))


def test_boundaries_must_increase():
    with pytest.raises(ValueError):
        BinBoundaries((0.0, 0.0))


@settings(max_examples=300)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(1, 12))
def test_bin_index_monotone(a, b, L):
    bins = uniform_bins(L)
    lo, hi = sorted((a, b))
    assert 0 <= bin_index(lo, bins) <= bin_index(hi, bins) < L


def test_unusable_keypoints_fall_in_the_zero_ratio_bin():
    occluded = kp((60, 20, 0), (40, 20, 0), (58, 70, 0), (42, 70, 0))
    b = uniform_bins(4)
    assert detection_bin(occluded, b) == bin_index(0.0, b) == 2
    assert detection_bin(FACING_AWAY, b) == bin_index(0.36, b)

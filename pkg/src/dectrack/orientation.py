"""S2T orientation descriptor and its discretisation into orientation bins.

The S2T ratio is the confidence-weighted shoulder width over torso length.
Image y grows downward, so the torso length is taken hips-minus-shoulders:
an upright person has positive torso length, and a person facing away from
the camera (right shoulder on the image right) gets a positive ratio.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import TorsoKeypoints

DEGENERATE_TORSO_PX = 1e-6


class AllOccluded(ValueError):
    pass


class DegenerateTorso(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


@dataclass(frozen=True)
class S2TRatio:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"S2T ratio must be finite, got {self.value}")

    def __float__(self):
        return self.value


def s2t_ratio(kp: TorsoKeypoints) -> S2TRatio:
    rs, ls, rh, lh = kp
    total = rs.c + ls.c + rh.c + lh.c
    if total <= 0:
        raise AllOccluded("all torso keypoint confidences are zero")
    p_w = ((rs.c + ls.c) * (rs.x - ls.x) + (rh.c + lh.c) * (rh.x - lh.x)) / total
    p_h = ((rs.c + rh.c) * (rh.y - rs.y) + (ls.c + lh.c) * (lh.y - ls.y)) / total
    if abs(p_h) < DEGENERATE_TORSO_PX:
        raise DegenerateTorso(f"torso length {p_h!r} px is degenerate")
    return S2TRatio(p_w / p_h)


def try_s2t_ratio(kp: TorsoKeypoints) -> float | None:
    """S2T ratio as a float, or None when the keypoints carry no orientation."""
    try:
        return s2t_ratio(kp).value
    except (AllOccluded, DegenerateTorso, ValueError):
        return None


@dataclass(frozen=True)
class BinBoundaries:
    """Edges ``b_0 < ... < b_L``; bin ``l`` is ``[edges[l], edges[l+1])``."""

    edges: tuple[float, ...]

    def __post_init__(self):
        e = tuple(float(v) for v in self.edges)
        if len(e) < 2:
            raise ValueError("need at least two edges")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"edges must be strictly increasing: {e}")
        object.__setattr__(self, "edges", e)

    @property
    def L(self) -> int:
        return len(self.edges) - 1

    @property
    def interior(self) -> tuple[float, ...]:
        return self.edges[1:-1]

    @classmethod
    def from_interior(cls, interior: Iterable[float]) -> "BinBoundaries":
        return cls((-math.inf, *interior, math.inf))


def uniform_bins(L: int, lo: float = -1.0, hi: float = 1.0) -> BinBoundaries:
    step = (hi - lo) / L
    return BinBoundaries.from_interior(lo + step * i for i in range(1, L))


def kmeans_1d(values: Sequence[float], k: int) -> np.ndarray:
    """Globally optimal 1-D k-means; returns the k sorted cluster centres.

    Clusters of sorted data are contiguous, so the optimum is found by dynamic
    programming over split points on the distinct values (weighted by
    multiplicity). Equal-SSE alternatives resolve to the leftmost split, which
    keeps the leftmost centre lowest.
    """
    x, w = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    n = len(x)
    if n < k:
        raise TooFewSamples(f"k-means with k={k} needs at least {k} distinct values, got {n}")
    w = w.astype(np.float64)
    # prefix sums, index i covers x[:i]
    sw = np.concatenate([[0.0], np.cumsum(w)])
    swx = np.concatenate([[0.0], np.cumsum(w * x)])
    swxx = np.concatenate([[0.0], np.cumsum(w * x * x)])

    def sse(j: np.ndarray, i: int) -> np.ndarray:
        # cost of one cluster over x[j:i]
        cw = sw[i] - sw[j]
        cx = swx[i] - swx[j]
        return np.maximum((swxx[i] - swxx[j]) - cx * cx / cw, 0.0)

    cost = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for m in range(1, k + 1):
        # SSE obeys the quadrangle inequality, so the leftmost optimal split
        # is monotone in i and each row can be solved by divide and conquer
        stack = [(m, n - (k - m), m - 1, n - 1)]
        while stack:
            lo, hi, jlo, jhi = stack.pop()
            if lo > hi:
                continue
            i = (lo + hi) // 2
            j = np.arange(jlo, min(jhi, i - 1) + 1)
            total = cost[m - 1, j] + sse(j, i)
            best = int(np.argmin(total))
            cost[m, i] = total[best]
            split[m, i] = j[best]
            stack.append((lo, i - 1, jlo, j[best]))
            stack.append((i + 1, hi, j[best], jhi))

    centres = np.empty(k)
    i = n
    for m in range(k, 0, -1):
        j = split[m, i]
        centres[m - 1] = (swx[i] - swx[j]) / (sw[i] - sw[j])
        i = j
    return centres


def fit_bins(ratios: Iterable[float | S2TRatio], L: int, mode: str = "uniform",
             seed: int | None = None) -> BinBoundaries:
    """Fit ``L`` orientation bins.

    ``uniform`` splits [-1, 1] into equal widths; ``kmeans`` places interior
    edges halfway between sorted 1-D k-means centres of ``ratios``. The
    k-means solver is exact, so ``seed`` has no effect and is accepted only
    for call-site symmetry.
    """
    if L < 1:
        raise ValueError("L must be ≥ 1")
    if mode == "uniform":
        return uniform_bins(L)
    if mode != "kmeans":
        raise ValueError(f"unknown bin mode {mode!r}")
    vals = [float(r) for r in ratios]
    if L == 1:
        if not vals:
            raise TooFewSamples("k-means with k=1 needs at least 1 value")
        return BinBoundaries.from_interior(())
    c = kmeans_1d(vals, L)
    return BinBoundaries.from_interior((c[:-1] + c[1:]) / 2.0)


def bin_index(r: float | S2TRatio, b: BinBoundaries) -> int:
    value = float(r)
    if not math.isfinite(value):
        raise ValueError(f"ratio must be finite, got {value}")
    return bisect.bisect_right(b.interior, value)


def detection_bin(kp: TorsoKeypoints, b: BinBoundaries) -> int:
    """Bin for a detection; keypoints with no usable torso fall in the bin of ratio 0."""
    r = try_s2t_ratio(kp)
    return bin_index(0.0 if r is None else r, b)

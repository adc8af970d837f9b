"""Minimum-cost one-to-one assignment on rectangular cost matrices."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def min_cost_assignment(cost) -> list[tuple[int, int]]:
    """Pairs ``(row, col)`` of a minimum-cost assignment covering min(n_rows, n_cols) rows."""
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    rows, cols = linear_sum_assignment(c)
    return [(int(r), int(k)) for r, k in zip(rows, cols)]


def gated_assignment(cost, threshold: float) -> list[tuple[int, int]]:
    """Assignment where leaving a row or column unmatched costs ``threshold``.

    The matrix is padded to square with ``threshold`` and entries above it are
    capped, so a pair is worth keeping exactly when its cost is at most the
    threshold. Pairs with cost above the threshold are dropped.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    n = max(c.shape)
    padded = np.full((n, n), float(threshold))
    padded[: c.shape[0], : c.shape[1]] = np.minimum(c, threshold)
    rows, cols = linear_sum_assignment(padded)
    return [(int(r), int(k)) for r, k in zip(rows, cols)
            if r < c.shape[0] and k < c.shape[1] and c[r, k] <= threshold]

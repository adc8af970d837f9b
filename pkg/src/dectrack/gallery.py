"""Orientation-binned appearance galleries.

A gallery keeps, for each of ``L`` orientation bins, the running mean of the
embeddings absorbed into that bin together with their count. Storage is
``L * n_f`` floats per track no matter how long the track lives.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .core import DimensionMismatch


class BothEmpty(ValueError):
    """A gallery needed for a distance has no absorbed detections."""


class BinnedGallery:
    """Immutable value: every update returns a new gallery."""

    __slots__ = ("_means", "_counts")

    def __init__(self, means: np.ndarray, counts: np.ndarray):
        means = np.array(means, dtype=np.float64)
        counts = np.array(counts, dtype=np.int64)
        if means.ndim != 2 or counts.shape != (means.shape[0],):
            raise DimensionMismatch(f"means {means.shape} and counts {counts.shape} disagree")
        if (counts < 0).any():
            raise ValueError("bin counts must be non-negative")
        means[counts == 0] = 0.0
        means.setflags(write=False)
        counts.setflags(write=False)
        self._means = means
        self._counts = counts

    @classmethod
    def empty(cls, L: int, n_f: int) -> "BinnedGallery":
        return cls(np.zeros((L, n_f)), np.zeros(L, dtype=np.int64))

    @property
    def L(self) -> int:
        return self._means.shape[0]

    @property
    def n_f(self) -> int:
        return self._means.shape[1]

    @property
    def means(self) -> np.ndarray:
        return self._means

    @property
    def counts(self) -> np.ndarray:
        return self._counts

    @property
    def total(self) -> int:
        return int(self._counts.sum())

    @property
    def occupied(self) -> np.ndarray:
        return self._counts > 0

    def overall_mean(self) -> np.ndarray:
        if self.total == 0:
            raise BothEmpty("gallery has no absorbed detections")
        return self._counts @ self._means / self.total

    def __eq__(self, other):
        if not isinstance(other, BinnedGallery):
            return NotImplemented
        return (np.array_equal(self._counts, other._counts)
                and np.array_equal(self._means, other._means))

    __hash__ = None

    def __repr__(self):
        return f"BinnedGallery(L={self.L}, n_f={self.n_f}, counts={self._counts.tolist()})"


def _check_pair(g1: BinnedGallery, g2: BinnedGallery) -> None:
    if g1.L != g2.L or g1.n_f != g2.n_f:
        raise DimensionMismatch(
            f"gallery shapes differ: ({g1.L}, {g1.n_f}) vs ({g2.L}, {g2.n_f})")


def absorb(g: BinnedGallery, embedding, bin: int) -> BinnedGallery:
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (g.n_f,):
        raise DimensionMismatch(f"embedding length {e.shape} != n_f={g.n_f}")
    if not 0 <= bin < g.L:
        raise IndexError(f"bin {bin} outside [0, {g.L})")
    means = g.means.copy()
    counts = g.counts.copy()
    counts[bin] += 1
    means[bin] += (e - means[bin]) / counts[bin]
    return BinnedGallery(means, counts)


def gallery_distance(g1: BinnedGallery, g2: BinnedGallery) -> float:
    """L2 distance over the bins populated in both galleries.

    The norm over shared bins is rescaled by ``sqrt(L / n_shared)`` so pairs
    sharing few bins stay comparable with fully populated ones. With no
    shared bin the count-weighted overall means are compared instead.
    """
    _check_pair(g1, g2)
    if g1.total == 0 or g2.total == 0:
        raise BothEmpty("gallery distance needs two non-empty galleries")
    shared = g1.occupied & g2.occupied
    n_shared = int(shared.sum())
    if n_shared == 0:
        return float(np.linalg.norm(g1.overall_mean() - g2.overall_mean()))
    diff = g1.means[shared] - g2.means[shared]
    return float(np.sqrt(np.sum(diff * diff)) * math.sqrt(g1.L / n_shared))


def nearest_bin_distance(g: BinnedGallery, embedding) -> float:
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != (g.n_f,):
        raise DimensionMismatch(f"embedding length {e.shape} != n_f={g.n_f}")
    occ = g.occupied
    if not occ.any():
        raise BothEmpty("gallery has no populated bin")
    return float(np.min(np.linalg.norm(g.means[occ] - e, axis=1)))


def merge(g1: BinnedGallery, g2: BinnedGallery) -> BinnedGallery:
    _check_pair(g1, g2)
    counts = g1.counts + g2.counts
    denom = np.where(counts > 0, counts, 1)[:, None]
    means = (g1.counts[:, None] * g1.means + g2.counts[:, None] * g2.means) / denom
    return BinnedGallery(means, counts)


def merge_all(galleries) -> BinnedGallery:
    galleries = list(galleries)
    if not galleries:
        raise ValueError("nothing to merge")
    for g in galleries[1:]:
        _check_pair(galleries[0], g)
    counts = sum(g.counts for g in galleries)
    denom = np.where(counts > 0, counts, 1)[:, None]
    means = sum(g.counts[:, None] * g.means for g in galleries) / denom
    return BinnedGallery(means, counts)


# wire layout, per slot: u32 count, then n_f little-endian f32 when count > 0
_U32 = struct.Struct("<I")


def encoded_size(g: BinnedGallery) -> int:
    return 4 * g.L + 4 * g.n_f * int(g.occupied.sum())


def encode_gallery(g: BinnedGallery) -> bytes:
    parts = []
    for count, mean in zip(g.counts, g.means):
        parts.append(_U32.pack(int(count)))
        if count > 0:
            parts.append(mean.astype("<f4").tobytes())
    return b"".join(parts)


def decode_gallery(buf: bytes | memoryview, offset: int, L: int, n_f: int
                   ) -> tuple[BinnedGallery, int]:
    """Decode one gallery at ``offset``; returns it with the offset just past it.

    Raises ``struct.error``/``ValueError`` on truncation; the message codec
    turns those into positioned errors.
    """
    means = np.zeros((L, n_f))
    counts = np.zeros(L, dtype=np.int64)
    width = 4 * n_f
    for slot in range(L):
        (count,) = _U32.unpack_from(buf, offset)
        offset += 4
        if count:
            if offset + width > len(buf):
                raise ValueError(f"truncated embedding at byte {offset}")
            means[slot] = np.frombuffer(buf, dtype="<f4", count=n_f, offset=offset)
            offset += width
        counts[slot] = count
    return BinnedGallery(means, counts), offset

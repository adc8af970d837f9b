"""Re-identification and tracking evaluation.

``clear_mot`` follows the CLEAR MOT protocol: correspondences from the
previous frame are kept while their IoU stays above the threshold, the rest
are filled by a minimum-cost assignment on ``1 - IoU``, and a ground-truth
object whose hypothesis differs from its last matched one counts as an
identity switch. ``identity_scores`` matches whole trajectories once over the
sequence, maximising the number of frames on which matched pairs overlap.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import GLOBAL_ID_STRIDE
from .orientation import bin_index, fit_bins

_INVALID = 1e9


class EmptyGallery(ValueError):
    pass


@dataclass(frozen=True)
class EvalFrame:
    frame: int
    gt: tuple = ()
    hyp: tuple = ()

    def __post_init__(self):
        for name, items in (("gt", self.gt), ("hyp", self.hyp)):
            ids = [i for i, _ in items]
            if len(set(ids)) != len(ids):
                raise ValueError(f"frame {self.frame}: duplicate {name} ids")


@dataclass(frozen=True)
class MotScore:
    mota: float
    motp: float
    fp: int
    fn: int
    ids: int
    idf1: float = float("nan")
    idp: float = float("nan")
    idr: float = float("nan")
    n_gt: int = 0
    matches: int = 0

    def table_record(self) -> dict:
        """Columns in the order of the single-sensor results table."""
        return {"IDF1": self.idf1, "IDP": self.idp, "IDR": self.idr, "FP": self.fp,
                "FN": self.fn, "IDs": self.ids, "MOTA": self.mota, "MOTP": self.motp}


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    return np.array([[iou(a, b) for b in boxes_b] for a in boxes_a]).reshape(
        len(boxes_a), len(boxes_b))


@dataclass
class _ClearState:
    fp: int = 0
    fn: int = 0
    ids: int = 0
    n_gt: int = 0
    iou_sum: float = 0.0
    matches: int = 0
    current: dict = field(default_factory=dict)
    last: dict = field(default_factory=dict)


def clear_mot_counts(frames: Sequence[EvalFrame], iou_threshold: float = 0.5) -> _ClearState:
    st = _ClearState()
    for fr in sorted(frames, key=lambda f: f.frame):
        gt = dict(fr.gt)
        hyp = dict(fr.hyp)
        st.n_gt += len(gt)
        matched: dict = {}
        # keep last frame's correspondences that are still valid
        for g, h in st.current.items():
            if g in gt and h in hyp and h not in matched.values():
                v = iou(gt[g], hyp[h])
                if v >= iou_threshold:
                    matched[g] = h
        free_g = [g for g in gt if g not in matched]
        used = set(matched.values())
        free_h = [h for h in hyp if h not in used]
        if free_g and free_h:
            sim = iou_matrix([gt[g] for g in free_g], [hyp[h] for h in free_h])
            cost = np.where(sim >= iou_threshold, 1.0 - sim, _INVALID)
            for r, c in zip(*linear_sum_assignment(cost)):
                if cost[r, c] < _INVALID:
                    g, h = free_g[r], free_h[c]
                    if g in st.last and st.last[g] != h:
                        st.ids += 1
                    matched[g] = h
        for g, h in matched.items():
            st.iou_sum += iou(gt[g], hyp[h])
            st.last[g] = h
        st.matches += len(matched)
        st.fn += len(gt) - len(matched)
        st.fp += len(hyp) - len(matched)
        st.current = matched
    return st


def clear_mot(frames: Sequence[EvalFrame], iou_threshold: float = 0.5) -> MotScore:
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must be in (0, 1)")
    st = clear_mot_counts(frames, iou_threshold)
    mota = 1.0 - (st.fp + st.fn + st.ids) / st.n_gt if st.n_gt else float("nan")
    motp = st.iou_sum / st.matches if st.matches else float("nan")
    idf1, idp, idr = identity_scores(frames, iou_threshold)
    return MotScore(mota, motp, st.fp, st.fn, st.ids, idf1, idp, idr, st.n_gt, st.matches)


def identity_overlap(frames: Sequence[EvalFrame], iou_threshold: float = 0.5):
    """Per-trajectory frame counts and the gt x hyp overlap table."""
    gt_len: dict = defaultdict(int)
    hyp_len: dict = defaultdict(int)
    overlap: dict = defaultdict(int)
    for fr in frames:
        for g, gb in fr.gt:
            gt_len[g] += 1
        for h, hb in fr.hyp:
            hyp_len[h] += 1
        for g, gb in fr.gt:
            for h, hb in fr.hyp:
                if iou(gb, hb) >= iou_threshold:
                    overlap[g, h] += 1
    return dict(gt_len), dict(hyp_len), dict(overlap)


def identity_scores(frames: Sequence[EvalFrame], iou_threshold: float = 0.5
                    ) -> tuple[float, float, float]:
    """``(IDF1, IDP, IDR)`` from a global one-to-one trajectory matching."""
    gt_len, hyp_len, overlap = identity_overlap(frames, iou_threshold)
    n_gt, n_hyp = sum(gt_len.values()), sum(hyp_len.values())
    idtp = 0
    if overlap:
        gs, hs = sorted(gt_len, key=repr), sorted(hyp_len, key=repr)
        gi = {g: i for i, g in enumerate(gs)}
        hi = {h: i for i, h in enumerate(hs)}
        table = np.zeros((len(gs), len(hs)))
        for (g, h), v in overlap.items():
            table[gi[g], hi[h]] = v
        rows, cols = linear_sum_assignment(-table)
        idtp = int(table[rows, cols].sum())
    idp = idtp / n_hyp if n_hyp else (1.0 if n_gt == 0 else 0.0)
    idr = idtp / n_gt if n_gt else (1.0 if n_hyp == 0 else 0.0)
    idf1 = 2 * idtp / (n_gt + n_hyp) if (n_gt + n_hyp) else 1.0
    return idf1, idp, idr


# re-identification -------------------------------------------------------

RANK1_MODES = ("full", "average", "random_bins", "orientation_bins")


@dataclass(frozen=True, eq=False)
class LabeledFeatures:
    labels: np.ndarray
    features: np.ndarray
    ratios: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledFeatures":
        idx = np.asarray(idx)
        return LabeledFeatures(self.labels[idx], self.features[idx],
                               None if self.ratios is None else self.ratios[idx])


def split_gallery_query(data: LabeledFeatures, rng: np.random.Generator,
                        gallery_frac: float = 0.8) -> tuple[LabeledFeatures, LabeledFeatures]:
    """Per-identity random split; every identity keeps at least one gallery record."""
    g_idx, q_idx = [], []
    for label in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == label)
        idx = idx[rng.permutation(len(idx))]
        n_gal = max(1, int(round(gallery_frac * len(idx))))
        g_idx.extend(idx[:n_gal])
        q_idx.extend(idx[n_gal:])
    return data.subset(np.sort(g_idx)), data.subset(np.sort(q_idx))


def build_gallery(gallery: LabeledFeatures, mode: str, L: int = 2,
                  rng: np.random.Generator | None = None, bin_mode: str = "kmeans"
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Gallery vectors and their labels for one representation mode."""
    if len(gallery) == 0:
        raise EmptyGallery("gallery has no features")
    if mode == "full":
        return gallery.features, gallery.labels
    labels = np.unique(gallery.labels)
    if mode == "average":
        return (np.stack([gallery.features[gallery.labels == c].mean(axis=0) for c in labels]),
                labels)
    if mode == "random_bins":
        rng = rng or np.random.default_rng(0)
        assign = rng.integers(0, 2, size=len(gallery))
        return _binned(gallery, assign, 2, labels)
    if mode == "orientation_bins":
        if gallery.ratios is None:
            raise ValueError("orientation_bins needs S2T ratios")
        bins = fit_bins(gallery.ratios, L, bin_mode)
        assign = np.array([bin_index(r, bins) for r in gallery.ratios])
        return _binned(gallery, assign, L, labels)
    raise ValueError(f"unknown rank-1 mode {mode!r}")


def _binned(data: LabeledFeatures, assign: np.ndarray, L: int, labels) -> tuple:
    """Per-identity, per-bin mean vectors for every occupied (identity, bin) cell."""
    li = np.searchsorted(labels, data.labels)
    cell = li * L + np.asarray(assign, dtype=int)
    cells, inverse, counts = np.unique(cell, return_inverse=True, return_counts=True)
    sums = np.zeros((len(cells), data.features.shape[1]))
    np.add.at(sums, inverse, data.features)
    return sums / counts[:, None], np.asarray(labels)[cells // L]


def rank1(gallery: LabeledFeatures, queries: LabeledFeatures, mode: str, L: int = 2,
          rng: np.random.Generator | None = None, bin_mode: str = "kmeans"
          ) -> tuple[float, int]:
    """Rank-1 accuracy of ``queries`` against the ``mode`` gallery, and the gallery size."""
    vecs, labels = build_gallery(gallery, mode, L, rng, bin_mode)
    missing = set(np.unique(queries.labels)) - set(np.unique(labels))
    if missing:
        raise EmptyGallery(f"query identities missing from gallery: {sorted(missing)[:5]}")
    if len(queries) == 0:
        return float("nan"), len(vecs)
    d2 = (np.sum(queries.features ** 2, axis=1)[:, None] - 2 * queries.features @ vecs.T
          + np.sum(vecs ** 2, axis=1)[None, :])
    nearest = labels[np.argmin(d2, axis=1)]
    return float(np.mean(nearest == queries.labels)), len(vecs)


# assembling evaluation frames ------------------------------------------------

def eval_frames(gt_rows, hyp_rows) -> list[EvalFrame]:
    """Group ``(key, id, box)`` rows into EvalFrames keyed by ``key``.

    ``key`` is usually ``(sensor_id, frame)`` so several sensors evaluate as
    one sequence of independent frames.
    """
    gt = defaultdict(list)
    hyp = defaultdict(list)
    for key, i, box in gt_rows:
        gt[key].append((i, tuple(box)))
    for key, i, box in hyp_rows:
        hyp[key].append((i, tuple(box)))
    keys = sorted(set(gt) | set(hyp))
    return [EvalFrame(n, tuple(gt.get(k, ())), tuple(hyp.get(k, ())))
            for n, k in enumerate(keys)]


def hypothesis_rows(track_rows, stride: int = GLOBAL_ID_STRIDE) -> list[tuple]:
    """``((sensor_id, frame), id, box)`` rows scored under global ids.

    Rows are ``(sensor_id, frame, local_track_id, global_id, x, y, w, h)``.
    When one global id covers two tracks of the same sensor that coexist in
    time, the track with the smaller local id keeps the global id and the
    others are scored under their own packed ``(sensor_id, local_track_id)``.
    """
    frames = defaultdict(set)
    for sid, frame, tid, gid, *_ in track_rows:
        frames[gid, sid, tid].add(frame)
    relabel = {}
    members = defaultdict(list)
    for gid, sid, tid in sorted(frames):
        members[gid, sid].append(tid)
    for (gid, sid), tids in members.items():
        taken: set = set()
        for tid in tids:
            if frames[gid, sid, tid] & taken:
                relabel[sid, tid] = sid * stride + tid
            else:
                taken |= frames[gid, sid, tid]
    return [((sid, frame), relabel.get((sid, tid), gid), tuple(box))
            for sid, frame, tid, gid, *box in track_rows]


def evaluate_rows(gt_rows, hyp_rows, iou_threshold: float = 0.5) -> MotScore:
    return clear_mot(eval_frames(gt_rows, hyp_rows), iou_threshold)

"""Rao-Blackwellized particle filter over within-sensor data association.

Each particle samples one detection-to-track assignment history; given that
history, track states are solved in closed form by per-track Kalman filters
and appearance by per-track binned galleries. Sampling uses the assignment
likelihood itself as proposal, drawn detection by detection without
replacement, so a particle's weight is multiplied by the probability mass left
after earlier detections in the frame have claimed their tracks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .core import Detection, DimensionMismatch, RunConfig
from .gallery import BinnedGallery, BothEmpty, absorb, merge, nearest_bin_distance
from .motion import (
    KalmanState,
    MotionModel,
    SingularInnovation,
    initial_state,
    mahalanobis_many,
    update,
)
from .orientation import BinBoundaries, detection_bin

log = logging.getLogger(__name__)

NEW_TRACK = -1


class EmptyParticleSet(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrackState:
    kalman: KalmanState
    gallery: BinnedGallery
    first_frame: int
    last_seen: int
    misses: int = 0
    # merge of matched tracks' galleries from other sensors
    prior: Optional[BinnedGallery] = None
    view: Optional[BinnedGallery] = field(default=None, repr=False)

    def __post_init__(self):
        if self.view is None:
            view = self.gallery if self.prior is None else merge(self.gallery, self.prior)
            object.__setattr__(self, "view", view)


@dataclass(frozen=True)
class FrameAssignment:
    """Assignment of one frame: detection index -> local track id."""

    frame: int
    entries: dict
    born: frozenset = frozenset()
    boxes: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        targets = list(self.entries.values())
        if len(set(targets)) != len(targets):
            raise ValueError(f"frame {self.frame}: two detections share a track")


@dataclass(frozen=True)
class _HistoryNode:
    assignment: FrameAssignment
    parent: Optional["_HistoryNode"]


@dataclass
class Particle:
    weight: float
    tracks: dict = field(default_factory=dict)
    next_id: int = 0
    history: Optional[_HistoryNode] = None
    # tracks terminated since the last commit, kept for the batch summary
    ended: dict = field(default_factory=dict)
    # log-probability of the sampled assignment history under the model
    log_score: float = 0.0

    def copy(self) -> "Particle":
        # track states are immutable and history is a persistent list
        return Particle(self.weight, dict(self.tracks), self.next_id, self.history,
                        dict(self.ended), self.log_score)

    @property
    def assignment_history(self) -> list[FrameAssignment]:
        out = []
        node = self.history
        while node is not None:
            out.append(node.assignment)
            node = node.parent
        return out[::-1]


def softmin(distances, temperature: float) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    return softmax(-temperature * d)


def spatial_likelihood(z_pos, tracks: Sequence[KalmanState], beta: float,
                       model: MotionModel | None = None) -> np.ndarray:
    if not tracks:
        raise ValueError("spatial likelihood needs at least one track")
    model = model or MotionModel.constant_velocity()
    return softmin(mahalanobis_many(z_pos, list(tracks), model), beta)


def appearance_likelihood(embedding, galleries: Sequence[BinnedGallery],
                          gamma: float) -> np.ndarray:
    if not galleries:
        raise ValueError("appearance likelihood needs at least one gallery")
    return softmin([nearest_bin_distance(g, embedding) for g in galleries], gamma)


def _normalize_scores(track_scores: np.ndarray, cfg: RunConfig) -> np.ndarray:
    out = np.append(track_scores, cfg.new_track_likelihood)
    return out / out.sum()


def joint_assignment_likelihood(det: Detection, tracks: Sequence[TrackState], cfg: RunConfig,
                                model: MotionModel | None = None) -> np.ndarray:
    """Probability over ``tracks`` followed by one trailing new-track entry.

    Tracks farther than ``cfg.gate_distance`` (Mahalanobis) get zero mass
    when position is in use.
    """
    if not tracks:
        return np.array([1.0])
    model = model or MotionModel.from_config(cfg)
    score = np.ones(len(tracks))
    if cfg.use_position:
        d = mahalanobis_many(det.measurement, [t.kalman for t in tracks], model)
        score *= softmin(d, cfg.beta) * (d <= cfg.gate_distance)
    if cfg.use_appearance:
        score *= appearance_likelihood(det.embedding, [t.view for t in tracks], cfg.gamma)
    return _normalize_scores(score, cfg)


@dataclass(frozen=True, eq=False)
class FrameInput:
    """Per-frame detection arrays shared by all particles."""

    frame: int
    detections: tuple
    z: np.ndarray
    embeddings: np.ndarray
    bins: tuple

    @classmethod
    def build(cls, frame: int, dets: Sequence[Detection], bins: BinBoundaries,
              n_f: int) -> "FrameInput":
        dets = tuple(dets)
        for d in dets:
            if d.embedding.shape != (n_f,):
                raise DimensionMismatch(
                    f"detection at frame {d.frame} has embedding length "
                    f"{d.embedding.shape[0]}, expected {n_f}")
        z = np.array([d.measurement for d in dets]).reshape(len(dets), 4)
        emb = np.array([d.embedding for d in dets]).reshape(len(dets), n_f)
        return cls(frame, dets, z, emb, tuple(detection_bin(d.keypoints, bins) for d in dets))


def _predict_all(tracks: dict, model: MotionModel) -> dict:
    if not tracks:
        return {}
    ids = list(tracks)
    means = np.stack([tracks[i].kalman.mean for i in ids]) @ model.A.T
    covs = np.einsum("ij,njk,lk->nil", model.A, np.stack([tracks[i].kalman.cov for i in ids]),
                     model.A) + model.Q
    covs = (covs + covs.transpose(0, 2, 1)) / 2.0
    return {i: replace(tracks[i], kalman=KalmanState(means[n], covs[n]))
            for n, i in enumerate(ids)}


def _likelihood_matrix(fi: FrameInput, states: list, cfg: RunConfig,
                       model: MotionModel) -> np.ndarray:
    """Rows: detections. Columns: tracks then new-track. Rows sum to 1."""
    n_det, n_trk = len(fi.detections), len(states)
    if n_trk == 0:
        return np.ones((n_det, 1))
    score = np.ones((n_det, n_trk))
    if cfg.use_position:
        means = np.stack([s.kalman.mean for s in states])
        covs = np.stack([s.kalman.cov for s in states])
        S = np.einsum("ij,njk,lk->nil", model.C, covs, model.C) + model.R
        try:
            S_inv = np.linalg.inv(S)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation(str(exc)) from exc
        r = fi.z[:, None, :] - (means @ model.C.T)[None, :, :]
        d = np.sqrt(np.maximum(np.einsum("dti,tij,dtj->dt", r, S_inv, r), 0.0))
        score *= softmax(-cfg.beta * d, axis=1) * (d <= cfg.gate_distance)
    if cfg.use_appearance:
        owners, rows = [], []
        for n, s in enumerate(states):
            occ = s.view.occupied
            if not occ.any():
                raise BothEmpty(f"track {n} has an empty gallery")
            rows.append(s.view.means[occ])
            owners.extend([n] * int(occ.sum()))
        bank = np.concatenate(rows)
        dist = np.linalg.norm(fi.embeddings[:, None, :] - bank[None, :, :], axis=2)
        starts = np.flatnonzero(np.r_[True, np.diff(owners) != 0])
        nearest = np.minimum.reduceat(dist, starts, axis=1)
        score *= softmax(-cfg.gamma * nearest, axis=1)
    full = np.concatenate([score, np.full((n_det, 1), cfg.new_track_likelihood)], axis=1)
    return full / full.sum(axis=1, keepdims=True)


def _step(p: Particle, fi: FrameInput, cfg: RunConfig, rng: np.random.Generator,
          model: MotionModel) -> Particle:
    tracks = _predict_all(p.tracks, model)
    ids = list(tracks)
    states = [tracks[i] for i in ids]
    n_det = len(fi.detections)
    weight = p.weight
    log_score = p.log_score
    chosen: dict[int, int] = {}

    if n_det:
        P = _likelihood_matrix(fi, states, cfg, model)
        taken = np.zeros(P.shape[1], dtype=bool)
        for j in rng.permutation(n_det):
            allowed = np.where(taken, 0.0, P[j])
            mass = allowed.sum()
            weight *= mass
            col = int(rng.choice(len(allowed), p=allowed / mass))
            log_score += float(np.log(P[j, col]))
            if col < len(ids):
                taken[col] = True
            chosen[int(j)] = col

    next_id = p.next_id
    entries, born, boxes = {}, set(), {}
    assigned = set()
    for j in sorted(chosen):
        det = fi.detections[j]
        col = chosen[j]
        if col < len(ids):
            tid = ids[col]
            t = tracks[tid]
            kal, _ = update(t.kalman, fi.z[j], model)
            tracks[tid] = TrackState(kal, absorb(t.gallery, fi.embeddings[j], fi.bins[j]),
                                     t.first_frame, fi.frame, 0, t.prior)
        else:
            tid = next_id
            next_id += 1
            gal = absorb(BinnedGallery.empty(cfg.L, cfg.n_f), fi.embeddings[j], fi.bins[j])
            tracks[tid] = TrackState(initial_state(fi.z[j], cfg.init_var), gal,
                                     fi.frame, fi.frame)
            born.add(tid)
        assigned.add(tid)
        entries[j] = tid
        boxes[j] = tracks[tid].kalman.box

    ended = p.ended
    for tid in ids:
        if tid in assigned:
            continue
        t = tracks[tid]
        if t.misses + 1 > cfg.miss_limit:
            if ended is p.ended:
                ended = dict(p.ended)
            ended[tid] = tracks.pop(tid)
        else:
            tracks[tid] = replace(t, misses=t.misses + 1)

    node = _HistoryNode(FrameAssignment(fi.frame, entries, frozenset(born), boxes), p.history)
    return Particle(weight, tracks, next_id, node, ended, log_score)


def step_particle(p: Particle, frame_dets: Sequence[Detection], cfg: RunConfig,
                  rng: np.random.Generator, *, bins: BinBoundaries | None = None,
                  model: MotionModel | None = None, frame: int | None = None) -> Particle:
    """Advance one particle by one frame; returns a new particle."""
    from .orientation import uniform_bins

    bins = bins or uniform_bins(cfg.L)
    model = model or MotionModel.from_config(cfg)
    if frame is None:
        frame = frame_dets[0].frame if frame_dets else 0
    return _step(p, FrameInput.build(frame, frame_dets, bins, cfg.n_f), cfg, rng, model)


def normalize_weights(particles: list[Particle]) -> None:
    w = np.array([p.weight for p in particles])
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        log.warning("particle weights collapsed; resetting to uniform")
        w = np.ones(len(particles))
        total = w.sum()
    for p, wi in zip(particles, w / total):
        p.weight = float(wi)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    n = len(w) if n is None else n
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right")


def resample(particles: list[Particle], cfg: RunConfig,
             rng: np.random.Generator) -> list[Particle]:
    weights = [p.weight for p in particles]
    if effective_sample_size(weights) >= cfg.resample_ess_frac * len(particles):
        return particles
    idx = systematic_indices(weights, rng)
    out = [particles[i].copy() for i in idx]
    for p in out:
        p.weight = 1.0 / len(out)
    return out


def map_particle(particles: Sequence[Particle]) -> Particle:
    """Most probable particle: highest history log-probability, then highest weight.

    Importance weights alone carry no information about how probable a
    sampled history is when the proposal is the assignment likelihood itself,
    so the accumulated history probability ranks first. Ties go to the lowest
    index.
    """
    if not particles:
        raise EmptyParticleSet("no particles")
    best = 0
    for i, p in enumerate(particles[1:], start=1):
        q = particles[best]
        if (p.log_score, p.weight) > (q.log_score, q.weight):
            best = i
    return particles[best]


@dataclass(frozen=True)
class TrackPoint:
    sensor_id: int
    frame: int
    local_track_id: int
    box: tuple


class ParticleTracker:
    """One sensor's particle filter with batch-level commit to the MAP particle."""

    def __init__(self, sensor_id: int, cfg: RunConfig, bins: BinBoundaries,
                 rng: np.random.Generator):
        if bins.L != cfg.L:
            raise ValueError(f"bin boundaries have L={bins.L}, config has L={cfg.L}")
        self.sensor_id = sensor_id
        self.cfg = cfg
        self.bins = bins
        self.rng = rng
        self.model = MotionModel.from_config(cfg)
        self.particles = [Particle(1.0 / cfg.n_p) for _ in range(cfg.n_p)]
        self.features_absorbed = 0

    def step(self, frame: int, dets: Sequence[Detection]) -> None:
        fi = FrameInput.build(frame, dets, self.bins, self.cfg.n_f)
        self.particles = [_step(p, fi, self.cfg, self.rng, self.model) for p in self.particles]
        normalize_weights(self.particles)
        self.particles = resample(self.particles, self.cfg, self.rng)

    def commit(self) -> tuple[Particle, list[TrackPoint]]:
        """Collapse onto the MAP particle.

        Returns that particle (live tracks in ``tracks``, tracks terminated
        during the batch in ``ended``) and its trajectory points since the
        previous commit.
        """
        best = map_particle(self.particles)
        points = []
        for fa in best.assignment_history:
            for j, tid in fa.entries.items():
                points.append(TrackPoint(self.sensor_id, fa.frame, tid, fa.boxes[j]))
            self.features_absorbed += len(fa.entries)
        committed = Particle(1.0, dict(best.tracks), best.next_id, None)
        self.particles = [committed.copy() for _ in range(self.cfg.n_p)]
        for p in self.particles:
            p.weight = 1.0 / self.cfg.n_p
        return best, points

    def apply_priors(self, priors: dict) -> None:
        """Attach merged foreign galleries to live tracks (all particles are committed copies)."""
        for p in self.particles:
            for tid, prior in priors.items():
                if tid in p.tracks:
                    t = p.tracks[tid]
                    p.tracks[tid] = TrackState(t.kalman, t.gallery, t.first_frame,
                                               t.last_seen, t.misses, prior)

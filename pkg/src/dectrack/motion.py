"""Constant-velocity Kalman filter over the image-plane state.

State is ``[x, vx, y, vy, w, h]`` (box centre, velocity in px/frame, box
size); the measurement is ``[x, y, w, h]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RunConfig

MAX_CONDITION = 1e12

C = np.array([
    [1, 0, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 1],
], dtype=np.float64)


class SingularInnovation(np.linalg.LinAlgError):
    pass


def transition(dt: float) -> np.ndarray:
    A = np.eye(6)
    A[0, 1] = dt
    A[2, 3] = dt
    return A


@dataclass(frozen=True, eq=False)
class MotionModel:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dt: float = 1.0

    @classmethod
    def constant_velocity(cls, dt: float = 1.0, q_pos: float = 1.0, q_vel: float = 0.25,
                          q_box: float = 1.0, r_meas: float = 4.0) -> "MotionModel":
        Q = np.diag([q_pos, q_vel, q_pos, q_vel, q_box, q_box]).astype(np.float64)
        return cls(transition(dt), C.copy(), Q, np.eye(4) * r_meas, dt)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "MotionModel":
        return cls.constant_velocity(cfg.dt, cfg.q_pos, cfg.q_vel, cfg.q_box, cfg.r_meas)


@dataclass(frozen=True, eq=False)
class KalmanState:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def box(self) -> tuple[float, float, float, float]:
        """Estimated box as ``(x, y, w, h)`` with top-left origin."""
        x, _, y, _, w, h = self.mean
        return (float(x - w / 2.0), float(y - h / 2.0), float(w), float(h))


def initial_state(z, init_var=(10.0, 25.0, 10.0, 25.0, 10.0, 10.0)) -> KalmanState:
    x, y, w, h = np.asarray(z, dtype=np.float64)
    return KalmanState(np.array([x, 0.0, y, 0.0, w, h]), np.diag(np.asarray(init_var, float)))


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


def predict(s: KalmanState, m: MotionModel) -> KalmanState:
    return KalmanState(m.A @ s.mean, _symmetrize(m.A @ s.cov @ m.A.T + m.Q))


def innovation(s: KalmanState, m: MotionModel) -> np.ndarray:
    S = m.C @ s.cov @ m.C.T + m.R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > MAX_CONDITION:
        raise SingularInnovation("innovation covariance is not invertible")
    return _symmetrize(S)


def update(s: KalmanState, z, m: MotionModel) -> tuple[KalmanState, np.ndarray]:
    """Posterior state given measurement ``z``, plus the innovation covariance."""
    z = np.asarray(z, dtype=np.float64)
    S = innovation(s, m)
    PCt = s.cov @ m.C.T
    K = np.linalg.solve(S, PCt.T).T
    mean = s.mean + K @ (z - m.C @ s.mean)
    # Joseph form keeps the covariance PSD under round-off
    IKC = np.eye(6) - K @ m.C
    cov = IKC @ s.cov @ IKC.T + K @ m.R @ K.T
    return KalmanState(mean, _symmetrize(cov)), S


def mahalanobis(z, s: KalmanState, m: MotionModel) -> float:
    S = innovation(s, m)
    r = np.asarray(z, dtype=np.float64) - m.C @ s.mean
    return float(np.sqrt(max(r @ np.linalg.solve(S, r), 0.0)))


def mahalanobis_many(z, states, m: MotionModel) -> np.ndarray:
    """Mahalanobis distance from one measurement to several predicted states."""
    if not states:
        return np.zeros(0)
    means = np.stack([s.mean for s in states])
    covs = np.stack([s.cov for s in states])
    S = np.einsum("ij,njk,lk->nil", m.C, covs, m.C) + m.R
    if not np.all(np.isfinite(S)) or (np.linalg.cond(S) > MAX_CONDITION).any():
        raise SingularInnovation("innovation covariance is not invertible")
    r = np.asarray(z, dtype=np.float64)[None, :] - means @ m.C.T
    d2 = np.einsum("ni,ni->n", r, np.linalg.solve(S, r[..., None])[..., 0])
    return np.sqrt(np.maximum(d2, 0.0))

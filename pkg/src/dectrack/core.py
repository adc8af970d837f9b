"""Shared domain types, run configuration and RNG plumbing."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import yaml

# Global ids are (sensor_id, local_track_id) packed into one integer; integer
# order equals lexicographic order of the pair while local ids stay below this.
GLOBAL_ID_STRIDE = 1_000_000


class ConfigError(ValueError):
    """A RunConfig invariant does not hold."""

    def __init__(self, name: str, message: str):
        super().__init__(message)
        self.name = name


class DimensionMismatch(ValueError):
    pass


class Keypoint(NamedTuple):
    x: float
    y: float
    c: float


class TorsoKeypoints(NamedTuple):
    right_shoulder: Keypoint
    left_shoulder: Keypoint
    right_hip: Keypoint
    left_hip: Keypoint

    @classmethod
    def from_flat(cls, values) -> "TorsoKeypoints":
        v = [float(a) for a in values]
        if len(v) != 12:
            raise ValueError(f"expected 12 keypoint values, got {len(v)}")
        return cls(*(Keypoint(*v[i:i + 3]) for i in range(0, 12, 3)))

    def flat(self) -> tuple[float, ...]:
        return tuple(a for kp in self for a in kp)


@dataclass(frozen=True, eq=False)
class Detection:
    """One observation of one person by one sensor.

    ``bbox`` is ``(x, y, w, h)`` in image pixels with ``(x, y)`` the top-left
    corner. The tracker measures the box centre plus its size.
    """

    sensor_id: int
    frame: int
    bbox: tuple[float, float, float, float]
    embedding: np.ndarray
    keypoints: TorsoKeypoints
    gt_id: Optional[int] = None

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise DimensionMismatch("embedding must be a 1-D vector")
        emb = emb.copy()
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "bbox", tuple(float(b) for b in self.bbox))
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValueError(f"bbox width and height must be > 0, got {self.bbox}")
        for kp in self.keypoints:
            if not 0.0 <= kp.c <= 1.0:
                raise ValueError(f"keypoint confidence {kp.c} outside [0, 1]")

    @property
    def measurement(self) -> np.ndarray:
        x, y, w, h = self.bbox
        return np.array([x + w / 2.0, y + h / 2.0, w, h])

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (
            self.sensor_id == other.sensor_id
            and self.frame == other.frame
            and self.bbox == other.bbox
            and self.keypoints == other.keypoints
            and self.gt_id == other.gt_id
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


@dataclass(frozen=True, order=True)
class Identity:
    sensor_id: int
    local_track_id: int
    global_id: Optional[int] = field(default=None, compare=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.sensor_id, self.local_track_id)

    @property
    def packed(self) -> int:
        return self.sensor_id * GLOBAL_ID_STRIDE + self.local_track_id


@dataclass(frozen=True)
class RunConfig:
    """Run-level tunables. Every field maps 1:1 to a config-file key."""

    n_f: int = 128
    L: int = 6
    batch_len: int = 150
    n_p: int = 20
    beta: float = 5.0
    gamma: float = 5.0
    dt: float = 1.0
    new_track_likelihood: float = 1e-4
    miss_limit: int = 30
    cs_threshold: float = 0.8
    resample_ess_frac: float = 0.5
    bin_mode: str = "uniform"
    seed: int = 0
    # Mahalanobis distance beyond which a track cannot take a detection
    gate_distance: float = 9.5
    use_position: bool = True
    use_appearance: bool = True
    q_pos: float = 1.0
    q_vel: float = 0.25
    q_box: float = 1.0
    r_meas: float = 4.0
    init_var: tuple[float, ...] = (10.0, 25.0, 10.0, 25.0, 10.0, 10.0)
    workers: int = 1

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: RunConfig) -> RunConfig:
    """Return ``cfg`` unchanged, or raise ConfigError naming the first bad field."""
    checks = [
        ("n_f", cfg.n_f >= 1, "n_f must be ≥ 1"),
        ("L", cfg.L >= 1, "L must be ≥ 1"),
        ("batch_len", cfg.batch_len >= 1, "batch_len must be ≥ 1"),
        ("n_p", cfg.n_p >= 1, "n_p must be ≥ 1"),
        ("beta", cfg.beta > 0, "beta must be > 0"),
        ("gamma", cfg.gamma > 0, "gamma must be > 0"),
        ("dt", cfg.dt > 0, "dt must be > 0"),
        ("new_track_likelihood", cfg.new_track_likelihood > 0,
         "new_track_likelihood must be > 0"),
        ("miss_limit", cfg.miss_limit >= 0, "miss_limit must be ≥ 0"),
        ("cs_threshold", cfg.cs_threshold >= 0, "cs_threshold must be ≥ 0"),
        ("resample_ess_frac", 0 < cfg.resample_ess_frac <= 1,
         "resample_ess_frac must be in (0, 1]"),
        ("bin_mode", cfg.bin_mode in ("uniform", "kmeans"),
         "bin_mode must be one of uniform, kmeans"),
        ("gate_distance", cfg.gate_distance > 0, "gate_distance must be > 0"),
        ("use_position", cfg.use_position or cfg.use_appearance,
         "at least one of use_position, use_appearance must be true"),
        ("q_pos", min(cfg.q_pos, cfg.q_vel, cfg.q_box) >= 0,
         "process noise variances must be ≥ 0"),
        ("r_meas", cfg.r_meas > 0, "r_meas must be > 0"),
        ("init_var", len(cfg.init_var) == 6 and min(cfg.init_var) > 0,
         "init_var must hold 6 positive variances"),
        ("workers", cfg.workers >= 1, "workers must be ≥ 1"),
    ]
    for name, ok, message in checks:
        if not ok:
            raise ConfigError(name, message)
    return cfg


def config_from_mapping(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], f"unknown config key: {unknown[0]}")
    data = dict(data)
    if "init_var" in data:
        data["init_var"] = tuple(float(v) for v in data["init_var"])
    return validate_config(RunConfig(**data))


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("<file>", f"{path}: config must be a key-value mapping")
    return config_from_mapping(data)


def config_to_mapping(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["init_var"] = list(cfg.init_var)
    return out


def derive_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for sub-stream ``name`` (plus integer keys) of ``seed``.

    Keys are hashed with crc32 so streams do not depend on thread scheduling
    or on the order in which modules ask for them.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode()), *keys))
    return np.random.default_rng(ss)

"""Synthetic pedestrian worlds and detection-file I/O.

People walk piecewise-linear paths through a shared 2-D plane watched by
sensors with rectangular fields of view. A sensor reports a person when the
person's centre lies inside its FOV, in image coordinates relative to the
FOV's top-left corner. Appearance depends on identity and on which
orientation sector the person shows the sensor; torso keypoints are drawn
from the same relative heading so the S2T ratio is recoverable.

World spec file (YAML) keys, all optional except ``sensors``::

    n_people, n_f, world [x0, y0, x1, y1], speed_range [lo, hi],
    n_waypoints, start_spread, lane_jitter,
    sensors: [{id, fov: [x0, y0, x1, y1], view_angle}],
    people: [{waypoints: [[x, y], ...], speed, start_frame}],
    base_scale, offset_scale, n_sectors, sigma_f,
    sigma_z, miss_prob, clutter_rate,
    keypoint_dropout, keypoint_sigma, box_w [lo, hi], box_h [lo, hi]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .core import Detection, DimensionMismatch, Keypoint, TorsoKeypoints, derive_rng
from .metrics import LabeledFeatures
from .orientation import try_s2t_ratio


class InvalidSpec(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, message: str, path: str | None = None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class SensorLayout:
    sensor_id: int
    fov: tuple[float, float, float, float]
    view_angle: float = 0.0

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.fov
        return x0 <= x < x1 and y0 <= y < y1


@dataclass(frozen=True)
class PersonPath:
    waypoints: tuple
    speed: float
    start_frame: int = 0


@dataclass(frozen=True)
class WorldSpec:
    sensors: tuple = ()
    n_people: int = 10
    n_f: int = 32
    world: tuple = (0.0, 0.0, 1800.0, 400.0)
    speed_range: tuple = (2.0, 3.5)
    n_waypoints: int = 4
    start_spread: int = 300
    lane_jitter: float = 120.0
    one_way: bool = False
    people: Optional[tuple] = None
    base_scale: float = 1.0
    offset_scale: float = 0.3
    n_sectors: int = 4
    sigma_f: float = 0.02
    sigma_z: float = 2.0
    miss_prob: float = 0.05
    clutter_rate: float = 0.0
    keypoint_dropout: float = 0.05
    keypoint_sigma: float = 0.5
    box_w: tuple = (32.0, 40.0)
    box_h: tuple = (80.0, 100.0)

    def validate(self) -> "WorldSpec":
        if not self.sensors:
            raise InvalidSpec("at least one sensor is required")
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("sensor ids must be unique")
        for s in self.sensors:
            x0, y0, x1, y1 = s.fov
            if not (x1 > x0 and y1 > y0):
                raise InvalidSpec(f"sensor {s.sensor_id}: empty FOV {s.fov}")
            if not 0 <= s.sensor_id < 2 ** 16:
                raise InvalidSpec(f"sensor id {s.sensor_id} must fit in 16 bits")
        for name in ("sigma_f", "sigma_z", "keypoint_sigma", "clutter_rate",
                     "base_scale", "offset_scale", "lane_jitter"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be ≥ 0")
        for name in ("miss_prob", "keypoint_dropout"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        if self.n_f < 1 or self.n_sectors < 1 or self.n_waypoints < 0:
            raise InvalidSpec("n_f and n_sectors must be ≥ 1, n_waypoints ≥ 0")
        if self.people is None and self.n_people < 0:
            raise InvalidSpec("n_people must be ≥ 0")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise InvalidSpec("speed_range must satisfy 0 < lo <= hi")
        if min(self.box_w) <= 0 or min(self.box_h) <= 0:
            raise InvalidSpec("box sizes must be > 0")
        return self


def world_spec_from_mapping(data: Mapping) -> WorldSpec:
    data = dict(data)
    known = {f.name for f in fields(WorldSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidSpec(f"unknown world spec key: {unknown[0]}")
    try:
        sensors = tuple(
            SensorLayout(int(s["sensor_id"]), tuple(float(v) for v in s["fov"]),
                         float(s.get("view_angle", 0.0)))
            for s in data.pop("sensors", ()))
        people = data.pop("people", None)
        if people is not None:
            people = tuple(PersonPath(tuple(tuple(map(float, w)) for w in p["waypoints"]),
                                      float(p["speed"]), int(p.get("start_frame", 0)))
                           for p in people)
        for key in ("world", "speed_range", "box_w", "box_h"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return WorldSpec(sensors=sensors, people=people, **data).validate()
    except KeyError as exc:
        raise InvalidSpec(f"malformed world spec: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"malformed world spec: {exc}") from None


def load_world_spec(path: str | Path) -> WorldSpec:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise InvalidSpec(f"{path}: world spec must be a key-value mapping")
    return world_spec_from_mapping(data)


@dataclass(frozen=True)
class GTRecord:
    sensor_id: int
    frame: int
    gt_id: int
    box: tuple
    heading: float


@dataclass
class GroundTruth:
    records: list = field(default_factory=list)

    def rows(self, sensor_id: int | None = None):
        """``((sensor_id, frame), gt_id, box)`` rows for the metrics module."""
        return [((r.sensor_id, r.frame), r.gt_id, r.box) for r in self.records
                if sensor_id is None or r.sensor_id == sensor_id]


def _random_paths(spec: WorldSpec, rng: np.random.Generator) -> list[PersonPath]:
    x0, y0, x1, y1 = spec.world
    paths = []
    for _ in range(spec.n_people):
        lane = rng.uniform(y0 + 0.25 * (y1 - y0), y1 - 0.25 * (y1 - y0))
        xs = np.linspace(x0, x1, spec.n_waypoints + 2)
        ys = np.clip(lane + rng.uniform(-spec.lane_jitter, spec.lane_jitter, len(xs)), y0, y1)
        ys[0] = ys[-1] = lane
        # draw even when one-way so both settings share the rest of the stream
        if rng.random() < 0.5 and not spec.one_way:
            xs, ys = xs[::-1], ys[::-1]
        speed = rng.uniform(*spec.speed_range)
        start = int(rng.integers(0, spec.start_spread + 1))
        paths.append(PersonPath(tuple(zip(xs.tolist(), ys.tolist())), float(speed), start))
    return paths


def _position(path: PersonPath, frame: int):
    """Position and heading at ``frame``, or None when not (yet / any more) walking."""
    t = frame - path.start_frame
    if t < 0:
        return None
    dist = t * path.speed
    pts = path.waypoints
    for (ax, ay), (bx, by) in zip(pts, pts[1:]):
        seg = math.hypot(bx - ax, by - ay)
        if dist <= seg and seg > 0:
            f = dist / seg
            return ax + f * (bx - ax), ay + f * (by - ay), math.atan2(by - ay, bx - ax)
        dist -= seg
    return None


def torso_keypoints(box, rel_heading: float, rng: np.random.Generator | None = None,
                    sigma: float = 0.0, dropout: float = 0.0) -> TorsoKeypoints:
    """Four torso keypoints for a person whose heading relative to the camera axis is given.

    ``rel_heading = 0`` means facing away from the camera; the signed
    shoulder offset ``cos(rel_heading)`` then puts the right shoulder on the
    image right.
    """
    x, y, w, h = box
    cx = x + w / 2.0
    facing = math.cos(rel_heading)
    sh_y, hip_y = y + 0.22 * h, y + 0.52 * h
    sh_half, hip_half = 0.4 * w * facing, 0.3 * w * facing
    pts = [(cx + sh_half, sh_y), (cx - sh_half, sh_y), (cx + hip_half, hip_y),
           (cx - hip_half, hip_y)]
    out = []
    for px, py in pts:
        c = 1.0
        if rng is not None:
            px += rng.normal(0.0, sigma) if sigma > 0 else 0.0
            py += rng.normal(0.0, sigma) if sigma > 0 else 0.0
            c = 0.0 if rng.random() < dropout else float(rng.uniform(0.5, 1.0))
        out.append(Keypoint(float(px), float(py), c))
    return TorsoKeypoints(*out)


def sector_of(rel_heading: float, n_sectors: int) -> int:
    width = 2 * math.pi / n_sectors
    return int(round((rel_heading % (2 * math.pi)) / width)) % n_sectors


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    base: np.ndarray       # (n_people, n_f)
    offsets: np.ndarray    # (n_people, n_sectors, n_f)
    sigma_f: float

    @classmethod
    def draw(cls, n_people: int, n_f: int, n_sectors: int, base_scale: float,
             offset_scale: float, sigma_f: float, rng: np.random.Generator) -> "AppearanceModel":
        base = rng.normal(size=(n_people, n_f))
        base *= base_scale / np.linalg.norm(base, axis=1, keepdims=True).clip(1e-12)
        off = rng.normal(size=(n_people, n_sectors, n_f))
        off *= offset_scale / np.linalg.norm(off, axis=2, keepdims=True).clip(1e-12)
        return cls(base, off, sigma_f)

    def sample(self, person: int, sector: int, rng: np.random.Generator) -> np.ndarray:
        e = self.base[person] + self.offsets[person, sector]
        if self.sigma_f > 0:
            e = e + rng.normal(0.0, self.sigma_f, size=e.shape)
        return e

    @property
    def mean_norm(self) -> float:
        return float(np.mean(np.linalg.norm(self.base[:, None] + self.offsets, axis=2))) \
            if len(self.base) else 1.0


def generate(spec: WorldSpec, n_frames: int, seed: int
             ) -> tuple[dict[int, list[Detection]], GroundTruth]:
    """Detection streams per sensor and the matching ground truth."""
    spec.validate()
    if n_frames < 0:
        raise InvalidSpec("n_frames must be ≥ 0")
    rng = derive_rng(seed, "scenario")
    paths = list(spec.people) if spec.people is not None else _random_paths(spec, rng)
    n_people = len(paths)
    look = AppearanceModel.draw(n_people, spec.n_f, spec.n_sectors, spec.base_scale,
                                spec.offset_scale, spec.sigma_f, rng)
    sizes = [(float(rng.uniform(*spec.box_w)), float(rng.uniform(*spec.box_h)))
             for _ in range(n_people)]
    clutter_radius = look.mean_norm

    streams: dict[int, list[Detection]] = {s.sensor_id: [] for s in spec.sensors}
    gt = GroundTruth()
    for frame in range(n_frames):
        states = [_position(p, frame) for p in paths]
        for sensor in spec.sensors:
            sx, sy = sensor.fov[0], sensor.fov[1]
            frame_dets = []
            for pid, st in enumerate(states):
                if st is None or not sensor.contains(st[0], st[1]):
                    continue
                wx, wy, heading = st
                w, h = sizes[pid]
                box = (wx - sx - w / 2.0, wy - sy - h / 2.0, w, h)
                rel = heading - sensor.view_angle
                gt.records.append(GTRecord(sensor.sensor_id, frame, pid, box, rel))
                if rng.random() < spec.miss_prob:
                    continue
                noise = rng.normal(0.0, spec.sigma_z, size=4) if spec.sigma_z > 0 else np.zeros(4)
                nw, nh = max(w + noise[2], 1.0), max(h + noise[3], 1.0)
                ncx, ncy = box[0] + w / 2.0 + noise[0], box[1] + h / 2.0 + noise[1]
                nbox = (ncx - nw / 2.0, ncy - nh / 2.0, nw, nh)
                kp = torso_keypoints(nbox, rel, rng, spec.keypoint_sigma, spec.keypoint_dropout)
                emb = look.sample(pid, sector_of(rel, spec.n_sectors), rng)
                frame_dets.append(Detection(sensor.sensor_id, frame, nbox, emb, kp, pid))
            for _ in range(rng.poisson(spec.clutter_rate) if spec.clutter_rate > 0 else 0):
                x0, y0, x1, y1 = sensor.fov
                w, h = float(rng.uniform(*spec.box_w)), float(rng.uniform(*spec.box_h))
                cx, cy = rng.uniform(0, x1 - x0), rng.uniform(0, y1 - y0)
                box = (cx - w / 2.0, cy - h / 2.0, w, h)
                e = rng.normal(size=spec.n_f)
                e *= clutter_radius / max(np.linalg.norm(e), 1e-12)
                kp = torso_keypoints(box, rng.uniform(0, 2 * math.pi), rng,
                                     spec.keypoint_sigma, spec.keypoint_dropout)
                frame_dets.append(Detection(sensor.sensor_id, frame, box, e, kp, None))
            order = rng.permutation(len(frame_dets))
            streams[sensor.sensor_id].extend(frame_dets[i] for i in order)
    return streams, gt


def orientation_features(n_ids: int, per_id: int, n_f: int = 32, offset_scale: float = 1.0,
                         sigma_f: float = 0.1, n_sectors: int = 4, seed: int = 0,
                         keypoint_sigma: float = 0.0) -> list[Detection]:
    """Labelled re-ID records whose appearance depends on orientation sector.

    Each record views its identity from a uniformly random heading, so the
    per-identity feature cloud has one mode per sector.
    """
    rng = derive_rng(seed, "reid_features")
    look = AppearanceModel.draw(n_ids, n_f, n_sectors, 1.0, offset_scale, sigma_f, rng)
    out = []
    for pid in range(n_ids):
        for k in range(per_id):
            rel = float(rng.uniform(0, 2 * math.pi))
            box = (0.0, 0.0, 36.0, 90.0)
            kp = torso_keypoints(box, rel, rng, keypoint_sigma, 0.0)
            out.append(Detection(0, pid * per_id + k, box,
                                 look.sample(pid, sector_of(rel, n_sectors), rng), kp, pid))
    return out


def features_from_detections(dets: Iterable[Detection]) -> LabeledFeatures:
    """Labelled features with S2T ratios; records without label or usable torso are skipped."""
    labels, feats, ratios = [], [], []
    for d in dets:
        r = try_s2t_ratio(d.keypoints)
        if d.gt_id is None or r is None:
            continue
        labels.append(d.gt_id)
        feats.append(d.embedding)
        ratios.append(r)
    if not feats:
        return LabeledFeatures(np.zeros(0, dtype=int), np.zeros((0, 0)), np.zeros(0))
    return LabeledFeatures(np.asarray(labels), np.stack(feats), np.asarray(ratios))


# detection files ---------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_detections(path: str | Path, dets: Iterable[Detection], n_f: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n_f={n_f}\n")
        for d in dets:
            if d.embedding.shape != (n_f,):
                raise DimensionMismatch(f"embedding length {d.embedding.shape[0]} != {n_f}")
            fields_ = [str(d.sensor_id), str(d.frame), *map(_fmt, d.bbox),
                       *map(_fmt, d.embedding), *map(_fmt, d.keypoints.flat()),
                       "" if d.gt_id is None else str(d.gt_id)]
            fh.write(",".join(fields_) + "\n")


def _parse_header(line: str, path: str) -> int:
    text = line.strip().lstrip("#").strip()
    if not text.startswith("n_f="):
        raise ParseError(1, "header must declare n_f, e.g. '# n_f=128'", path)
    try:
        n_f = int(text[4:])
    except ValueError:
        raise ParseError(1, f"bad n_f value {text[4:]!r}", path) from None
    if n_f < 1:
        raise ParseError(1, "n_f must be ≥ 1", path)
    return n_f


def load_detections(path: str | Path, n_f: int | None = None) -> dict[int, list[Detection]]:
    """Per-sensor detection streams from one file, in file order.

    Each record is ``sensor_id, frame, x, y, w, h, <n_f embedding values>,
    <4 keypoints as x, y, c>, gt_id`` with ``gt_id`` left empty for clutter.
    """
    path = str(path)
    streams: dict[int, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ParseError(1, "missing n_f header", path)
        declared = _parse_header(header, path)
        if n_f is not None and declared != n_f:
            raise DimensionMismatch(f"{path}: file declares n_f={declared}, expected {n_f}")
        width = 2 + 4 + declared + 12 + 1
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise ParseError(lineno, f"expected {width} fields for n_f={declared}, "
                                         f"got {len(parts)}", path)
            try:
                sensor_id, frame = int(parts[0]), int(parts[1])
                nums = [float(v) for v in parts[2:-1]]
                gt_id = int(parts[-1]) if parts[-1].strip() else None
                det = Detection(sensor_id, frame, tuple(nums[:4]),
                                np.array(nums[4:4 + declared]),
                                TorsoKeypoints.from_flat(nums[4 + declared:]), gt_id)
            except ValueError as exc:
                raise ParseError(lineno, str(exc), path) from None
            streams.setdefault(sensor_id, []).append(det)
    return streams


def write_ground_truth(path: str | Path, gt: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sensor_id,frame,gt_id,x,y,w,h,heading\n")
        for r in gt.records:
            fh.write(",".join([str(r.sensor_id), str(r.frame), str(r.gt_id),
                               *map(_fmt, r.box), _fmt(r.heading)]) + "\n")


def load_ground_truth(path: str | Path) -> GroundTruth:
    gt = GroundTruth()
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 8:
                raise ParseError(lineno, f"expected 8 fields, got {len(parts)}", str(path))
            try:
                gt.records.append(GTRecord(int(parts[0]), int(parts[1]), int(parts[2]),
                                           tuple(float(v) for v in parts[3:7]), float(parts[7])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc), str(path)) from None
    return gt


def streams_to_sequence(streams: Mapping[int, Sequence[Detection]]) -> list[Detection]:
    return [d for sid in sorted(streams) for d in streams[sid]]

"""Decentralised batch cycle: local tracking, gallery exchange, association.

Wire format of a gallery message (all integers little-endian)::

    header   u16 version | u16 sensor_id | u32 batch_index | u32 n_entries
    entry    u32 local_track_id | u32 first_frame | u32 last_frame | L slots
    slot     u32 count | count > 0: n_f x f32 running mean

The header is 12 bytes and each entry costs ``12 + sum(slot sizes)``, so the
payload grows with the number of tracks active in the batch and not with the
number of frames.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Detection, Identity, RunConfig, derive_rng, validate_config
from .cross_sensor import (
    MatchSet,
    TrackSummary,
    associate_pair,
    foreign_priors,
    resolve_identities,
    ring_schedule,
)
from .gallery import BinnedGallery, decode_gallery, encode_gallery, encoded_size
from .orientation import BinBoundaries, fit_bins, try_s2t_ratio, uniform_bins
from .within_sensor import ParticleTracker, TrackPoint

log = logging.getLogger(__name__)

WIRE_VERSION = 1
_HEADER = struct.Struct("<HHII")
_ENTRY = struct.Struct("<III")
HEADER_BYTES = _HEADER.size


class MalformedMessage(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed gallery message at byte {offset}: {reason}")
        self.offset = offset


def _to_wire_precision(g: BinnedGallery) -> BinnedGallery:
    return BinnedGallery(g.means.astype(np.float32).astype(np.float64), g.counts)


@dataclass(frozen=True, eq=False)
class MessageEntry:
    local_track_id: int
    first_frame: int
    last_frame: int
    gallery: BinnedGallery

    def __post_init__(self):
        object.__setattr__(self, "gallery", _to_wire_precision(self.gallery))

    def __eq__(self, other):
        if not isinstance(other, MessageEntry):
            return NotImplemented
        return ((self.local_track_id, self.first_frame, self.last_frame)
                == (other.local_track_id, other.first_frame, other.last_frame)
                and self.gallery == other.gallery)

    __hash__ = None


@dataclass(frozen=True)
class GalleryMessage:
    """Galleries are held at f32 precision, exactly as they travel."""

    sensor_id: int
    batch_index: int
    entries: tuple = ()
    version: int = WIRE_VERSION

    @property
    def payload_bytes(self) -> int:
        return HEADER_BYTES + sum(_ENTRY.size + encoded_size(e.gallery) for e in self.entries)

    @classmethod
    def from_summaries(cls, sensor_id: int, batch_index: int,
                       summaries: Sequence[TrackSummary]) -> "GalleryMessage":
        return cls(sensor_id, batch_index, tuple(
            MessageEntry(s.identity.local_track_id, s.first_frame, s.last_frame, s.gallery)
            for s in summaries))

    def summaries(self) -> list[TrackSummary]:
        return [TrackSummary(Identity(self.sensor_id, e.local_track_id), e.gallery,
                             e.first_frame, e.last_frame) for e in self.entries]


def encode_message(msg: GalleryMessage) -> bytes:
    parts = [_HEADER.pack(msg.version, msg.sensor_id, msg.batch_index, len(msg.entries))]
    for e in msg.entries:
        parts.append(_ENTRY.pack(e.local_track_id, e.first_frame, e.last_frame))
        parts.append(encode_gallery(e.gallery))
    return b"".join(parts)


def decode_message(buf: bytes, L: int, n_f: int) -> GalleryMessage:
    """Inverse of :func:`encode_message`; ``L`` and ``n_f`` are run constants."""
    buf = bytes(buf)
    if len(buf) < HEADER_BYTES:
        raise MalformedMessage(len(buf), "truncated header")
    version, sensor_id, batch_index, n_entries = _HEADER.unpack_from(buf, 0)
    if version != WIRE_VERSION:
        raise MalformedMessage(0, f"unsupported version {version}")
    offset = HEADER_BYTES
    entries = []
    for _ in range(n_entries):
        if offset + _ENTRY.size > len(buf):
            raise MalformedMessage(offset, "truncated entry header")
        track, first, last = _ENTRY.unpack_from(buf, offset)
        offset += _ENTRY.size
        try:
            gallery, end = decode_gallery(buf, offset, L, n_f)
        except (struct.error, ValueError) as exc:
            raise MalformedMessage(offset, f"truncated gallery ({exc})") from None
        if first > last:
            raise MalformedMessage(offset - _ENTRY.size, "first_frame after last_frame")
        offset = end
        entries.append(MessageEntry(track, first, last, gallery))
    if offset != len(buf):
        raise MalformedMessage(offset, f"{len(buf) - offset} trailing bytes")
    return GalleryMessage(sensor_id, batch_index, tuple(entries), version)


@dataclass
class BatchReport:
    batch_index: int
    track_counts: dict
    payload_bytes: dict
    matches: list
    full_gallery_features: dict
    wall_time: float = 0.0

    @property
    def total_bytes(self) -> int:
        return sum(self.payload_bytes.values())

    def to_record(self, timing: bool = True) -> dict:
        rec = {
            "batch_index": self.batch_index,
            "track_counts": {str(k): v for k, v in sorted(self.track_counts.items())},
            "payload_bytes": {str(k): v for k, v in sorted(self.payload_bytes.items())},
            "total_bytes": self.total_bytes,
            "matches": self.matches,
            "full_gallery_features": {str(k): v for k, v in
                                      sorted(self.full_gallery_features.items())},
        }
        if timing:
            rec["wall_time"] = round(self.wall_time, 6)
        return rec

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_record(timing), sort_keys=True)


class SensorNode:
    """One sensor: its particle tracker plus a frame cursor."""

    def __init__(self, sensor_id: int, cfg: RunConfig, bins: BinBoundaries | None = None):
        self.sensor_id = sensor_id
        self.cfg = validate_config(cfg)
        self.bins = bins or uniform_bins(cfg.L)
        self.tracker = ParticleTracker(sensor_id, cfg, self.bins,
                                       derive_rng(cfg.seed, "within_sensor", sensor_id))
        self.cursor = 0
        self.points: list[TrackPoint] = []

    @property
    def features_absorbed(self) -> int:
        return self.tracker.features_absorbed

    def run_batch(self, frames: Sequence[Sequence[Detection]]) -> list[TrackSummary]:
        """Track ``frames`` (consecutive, starting at the cursor); summarise the MAP tracks.

        Summaries cover every track that received a detection in this batch,
        including tracks that terminated before the batch ended.
        """
        start = self.cursor
        for offset, dets in enumerate(frames):
            frame = start + offset
            for d in dets:
                if d.frame != frame or d.sensor_id != self.sensor_id:
                    raise ValueError(f"sensor {self.sensor_id}: detection for sensor "
                                     f"{d.sensor_id} frame {d.frame} fed at frame {frame}")
            self.tracker.step(frame, dets)
        self.cursor = start + len(frames)
        best, points = self.tracker.commit()
        self.points.extend(points)
        tracks = {**best.ended, **best.tracks}
        return [TrackSummary(Identity(self.sensor_id, tid), t.gallery, t.first_frame, t.last_seen)
                for tid, t in sorted(tracks.items()) if t.last_seen >= start]

    def apply_priors(self, priors: Mapping[int, BinnedGallery]) -> None:
        self.tracker.apply_priors(dict(priors))


def run_batch(node: SensorNode, frames) -> tuple[SensorNode, list[TrackSummary]]:
    return node, node.run_batch(frames)


def frames_by_index(stream: Sequence[Detection], n_frames: int) -> list[list[Detection]]:
    frames: list[list[Detection]] = [[] for _ in range(n_frames)]
    for d in stream:
        frames[d.frame].append(d)
    return frames


@dataclass
class SystemResult:
    points: list
    global_ids: dict
    reports: list
    messages: list = field(default_factory=list)

    def tracks(self) -> list[tuple]:
        """Rows ``(sensor_id, frame, local_track_id, global_id, x, y, w, h)``."""
        rows = []
        for p in self.points:
            gid = self.global_ids[(p.sensor_id, p.local_track_id)]
            rows.append((p.sensor_id, p.frame, p.local_track_id, gid, *p.box))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        return rows


def _kmeans_bins(streams: Mapping[int, Sequence[Detection]], cfg: RunConfig) -> BinBoundaries:
    ratios = []
    for stream in streams.values():
        for d in stream:
            if d.frame < cfg.batch_len:
                r = try_s2t_ratio(d.keypoints)
                if r is not None:
                    ratios.append(r)
    try:
        return fit_bins(ratios, cfg.L, "kmeans")
    except ValueError:
        log.warning("too few orientation samples for k-means bins; using uniform bins")
        return uniform_bins(cfg.L)


def run_system(streams: Mapping[int, Sequence[Detection]], cfg: RunConfig,
               n_frames: int | None = None, sensor_ids: Sequence[int] | None = None
               ) -> SystemResult:
    """Run every sensor in fusion batches of ``cfg.batch_len`` frames.

    After each batch the sensors' gallery messages are encoded, decoded (so
    association sees wire precision), added to the shared gallery of all
    summaries seen so far, matched pairwise in ring order, and closed
    transitively into global identities. Matched tracks get the merged
    galleries of their partners before the next batch starts.
    """
    cfg = validate_config(cfg)
    sensor_ids = sorted(sensor_ids if sensor_ids is not None else streams)
    if n_frames is None:
        n_frames = 1 + max((d.frame for s in streams.values() for d in s), default=-1)
    bins = _kmeans_bins(streams, cfg) if cfg.bin_mode == "kmeans" else uniform_bins(cfg.L)
    nodes = {sid: SensorNode(sid, cfg, bins) for sid in sensor_ids}
    frames = {sid: frames_by_index(streams.get(sid, ()), n_frames) for sid in sensor_ids}

    shared: dict[tuple, TrackSummary] = {}
    latest: list[MatchSet] = []
    reports, messages = [], []
    schedule = ring_schedule(sensor_ids)
    n_batches = -(-n_frames // cfg.batch_len)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for b in range(n_batches):
            t0 = time.perf_counter()
            lo, hi = b * cfg.batch_len, min((b + 1) * cfg.batch_len, n_frames)
            futures = {sid: pool.submit(nodes[sid].run_batch, frames[sid][lo:hi])
                       for sid in sensor_ids}
            summaries = {sid: futures[sid].result() for sid in sensor_ids}

            payload = {}
            for sid in sensor_ids:
                wire = encode_message(GalleryMessage.from_summaries(sid, b, summaries[sid]))
                messages.append(wire)
                payload[sid] = len(wire) if len(sensor_ids) > 1 else 0
                for s in decode_message(wire, cfg.L, cfg.n_f).summaries():
                    shared[s.identity.key] = s

            # the registry holds every summary so far, so this batch's matching
            # supersedes earlier ones
            batch_matches = []
            for a, c in schedule:
                sa = [s for k, s in sorted(shared.items()) if k[0] == a]
                sc = [s for k, s in sorted(shared.items()) if k[0] == c]
                batch_matches.append(associate_pair(sa, sc, cfg))
            latest = batch_matches

            priors = foreign_priors(list(shared.values()), latest)
            for sid in sensor_ids:
                nodes[sid].apply_priors({k[1]: g for k, g in priors.items() if k[0] == sid})

            reports.append(BatchReport(
                batch_index=b,
                track_counts={sid: len(summaries[sid]) for sid in sensor_ids},
                payload_bytes=payload,
                matches=sorted([[p.track_a.sensor_id, p.track_a.local_track_id,
                                 p.track_b.sensor_id, p.track_b.local_track_id,
                                 round(p.distance, 6)] for ms in batch_matches for p in ms]),
                full_gallery_features={sid: nodes[sid].features_absorbed for sid in sensor_ids},
                wall_time=time.perf_counter() - t0,
            ))

    points = [p for sid in sensor_ids for p in nodes[sid].points]
    identities = {Identity(p.sensor_id, p.local_track_id) for p in points}
    resolved = resolve_identities(latest, identities)
    global_ids = {i.key: g for i, g in resolved.items()}
    return SystemResult(points, global_ids, reports, messages)

"""Command-line entry points.

Every command prints line-delimited JSON on stdout. Exit codes: 0 success,
1 invalid input or configuration, 2 file-system trouble, 3 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import struct
import sys
from pathlib import Path

import yaml

from .core import ConfigError, DimensionMismatch, config_from_mapping, derive_rng
from .metrics import (RANK1_MODES, EmptyGallery, evaluate_rows, hypothesis_rows, rank1,
                      split_gallery_query)
from .netsim import run_system
from .orientation import TooFewSamples
from .scenario import (
    InvalidSpec,
    ParseError,
    features_from_detections,
    generate,
    load_detections,
    load_ground_truth,
    load_world_spec,
    streams_to_sequence,
    write_detections,
    write_ground_truth,
)

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

TRACKS_FILE = "tracks.csv"
REPORTS_FILE = "reports.jsonl"
MESSAGES_FILE = "messages.bin"
GT_FILE = "gt.csv"
TRACK_HEADER = "sensor_id,frame,local_track_id,global_id,x,y,w,h"

_VALIDATION = (ConfigError, DimensionMismatch, InvalidSpec, ParseError, EmptyGallery,
               TooFewSamples)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True, allow_nan=True))


def _clean(v):
    return None if isinstance(v, float) and math.isnan(v) else v


# track files -------------------------------------------------------------

def write_tracks(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACK_HEADER + "\n")
        for sid, frame, tid, gid, *box in rows:
            fh.write(",".join([str(sid), str(frame), str(tid), str(gid),
                               *(repr(float(b)) for b in box)]) + "\n")


def load_tracks(path: Path) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 8:
                raise ParseError(lineno, f"expected 8 fields, got {len(parts)}", str(path))
            try:
                rows.append((*(int(v) for v in parts[:4]), *(float(v) for v in parts[4:])))
            except ValueError as exc:
                raise ParseError(lineno, str(exc), str(path)) from None
    return rows


def write_messages(path: Path, messages) -> None:
    """Byte log: each message prefixed by its u32 little-endian length."""
    with open(path, "wb") as fh:
        for m in messages:
            fh.write(struct.pack("<I", len(m)))
            fh.write(m)


def read_messages(path: Path) -> list[bytes]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError(0, f"truncated length prefix at byte {pos}", str(path))
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ParseError(0, f"truncated message at byte {pos}", str(path))
        out.append(data[pos:pos + n])
        pos += n
    return out


def _detection_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"detections directory not found: {directory}")
    files = sorted(directory.glob("detections*.csv"))
    if not files:
        raise FileNotFoundError(f"no detections*.csv files in {directory}")
    return files


def _load_streams(directory: Path, n_f: int | None):
    streams: dict = {}
    for f in _detection_files(directory):
        for sid, dets in load_detections(f, n_f).items():
            streams.setdefault(sid, []).extend(dets)
    return streams


def _read_header_nf(path: Path) -> int:
    with open(path, encoding="utf-8") as fh:
        line = fh.readline().strip().lstrip("#").strip()
    if not line.startswith("n_f="):
        raise ParseError(1, "header must declare n_f", str(path))
    try:
        return int(line[4:])
    except ValueError:
        raise ParseError(1, f"bad n_f value {line[4:]!r}", str(path)) from None


def _load_config_mapping(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("<file>", f"{path}: config must be a key-value mapping")
    return data


# commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = load_world_spec(args.spec)
    if args.frames < 0:
        raise InvalidSpec("--frames must be ≥ 0")
    streams, gt = generate(spec, args.frames, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in spec.sensors:
        write_detections(out / f"detections_s{s.sensor_id}.csv",
                         streams.get(s.sensor_id, []), spec.n_f)
    write_ground_truth(out / GT_FILE, gt)
    _emit({"command": "simulate", "out": str(out), "frames": args.frames, "seed": args.seed,
           "detections": {str(k): len(v) for k, v in sorted(streams.items())},
           "gt_records": len(gt.records)})
    return EXIT_OK


def cmd_track(args) -> int:
    directory = Path(args.detections)
    files = _detection_files(directory)
    data = _load_config_mapping(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    data.setdefault("n_f", _read_header_nf(files[0]))
    cfg = config_from_mapping(data)
    streams = _load_streams(directory, cfg.n_f)
    result = run_system(streams, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = result.tracks()
    write_tracks(out / TRACKS_FILE, rows)
    write_messages(out / MESSAGES_FILE, result.messages)
    with open(out / REPORTS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for r in result.reports:
            fh.write(r.to_json() + "\n")
    for r in result.reports:
        print(r.to_json())
    _emit({"command": "track", "out": str(out), "rows": len(rows),
           "local_tracks": len(result.global_ids),
           "global_ids": len(set(result.global_ids.values())),
           "total_bytes": sum(r.total_bytes for r in result.reports)})
    return EXIT_OK


def cmd_reid_eval(args) -> int:
    if args.bins < 1:
        raise ConfigError("bins", "--bins must be ≥ 1")
    streams = load_detections(args.features)
    data = features_from_detections(streams_to_sequence(streams))
    if len(data) == 0:
        raise EmptyGallery(f"{args.features}: no labelled records with usable keypoints")
    gallery, queries = split_gallery_query(data, derive_rng(args.seed, "reid_split"))
    acc, count = rank1(gallery, queries, args.mode, args.bins,
                       derive_rng(args.seed, "random_bins"), args.bin_mode)
    _emit({"command": "reid-eval", "mode": args.mode, "bins": args.bins, "seed": args.seed,
           "rank1": _clean(acc), "gallery_features": count,
           "gallery_records": len(gallery), "queries": len(queries)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not 0 < args.iou < 1:
        raise ConfigError("iou", "--iou must be in (0, 1)")
    hyp = load_tracks(Path(args.tracks) / TRACKS_FILE)
    gt = load_ground_truth(Path(args.gt) / GT_FILE)
    score = evaluate_rows(gt.rows(), hypothesis_rows(hyp), args.iou)
    record = {"command": "evaluate"}
    record.update({k: _clean(v) for k, v in score.table_record().items()})
    print(json.dumps(record))
    return EXIT_OK


def cmd_report(args) -> int:
    """Summarise a reports.jsonl file: totals per sensor plus the per-batch byte series."""
    path = Path(args.reports)
    if path.is_dir():
        path = path / REPORTS_FILE
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ParseError(lineno, str(exc), str(path)) from None
    per_sensor: dict = {}
    try:
        for rec in records:
            for sid, b in rec["payload_bytes"].items():
                per_sensor.setdefault(sid, 0)
                per_sensor[sid] += b
        last = records[-1]["full_gallery_features"] if records else {}
        _emit({"command": "report", "batches": len(records),
               "bytes_per_batch": [rec["total_bytes"] for rec in records],
               "bytes_per_sensor": per_sensor,
               "total_bytes": sum(per_sensor.values()),
               "matches": sum(len(rec["matches"]) for rec in records),
               "full_gallery_features": last})
    except (KeyError, TypeError) as exc:
        raise ParseError(0, f"not a batch report: missing {exc}", str(path)) from None
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dectrack", description="Decentralized multi-sensor tracking harness")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic detections and ground truth")
    s.add_argument("--spec", required=True, help="world spec (YAML)")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("track", help="run the decentralized tracker")
    t.add_argument("--detections", required=True, help="directory of detections*.csv files")
    t.add_argument("--config", help="run config (YAML); keys match RunConfig fields")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_track)

    r = sub.add_parser("reid-eval", help="rank-1 re-identification on a labelled file")
    r.add_argument("--features", required=True, help="detections file with gt ids")
    r.add_argument("--bins", type=int, default=2)
    r.add_argument("--mode", choices=RANK1_MODES, default="orientation_bins")
    r.add_argument("--bin-mode", choices=("kmeans", "uniform"), default="kmeans")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_reid_eval)

    e = sub.add_parser("evaluate", help="CLEAR MOT and identity scores")
    e.add_argument("--tracks", required=True, help=f"directory holding {TRACKS_FILE}")
    e.add_argument("--gt", required=True, help=f"directory holding {GT_FILE}")
    e.add_argument("--iou", type=float, default=0.5)
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="summarise batch reports")
    rp.add_argument("--reports", required=True, help=f"{REPORTS_FILE} or its directory")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except _VALIDATION as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

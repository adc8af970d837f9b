import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dectrack.core import Identity, RunConfig
from dectrack.cross_sensor import TrackSummary
from dectrack.gallery import BinnedGallery, absorb
from dectrack.netsim import (
    HEADER_BYTES,
    GalleryMessage,
    MalformedMessage,
    SensorNode,
    decode_message,
    encode_message,
    frames_by_index,
    run_batch,
    run_system,
)

from helpers import det

CFG = RunConfig(n_f=3, L=2, n_p=5, batch_len=20)


def walker(n_frames, x0, vx, emb, sensor=0, start=0, gt_id=None):
    return [det(f, (x0 + vx * (f - start) - 5, -10, 10, 20), emb, sensor=sensor, gt_id=gt_id)
            for f in range(start, start + n_frames)]


def random_message(rng, L=3, n_f=4):
    summaries = []
    for tid in range(int(rng.integers(0, 5))):
        g = BinnedGallery.empty(L, n_f)
        for _ in range(int(rng.integers(1, 6))):
            g = absorb(g, rng.normal(size=n_f), int(rng.integers(L)))
        first = int(rng.integers(0, 100))
        summaries.append(TrackSummary(Identity(2, tid), g, first, first + int(rng.integers(0, 50))))
    return GalleryMessage.from_summaries(2, int(rng.integers(0, 9)), summaries)


# run_batch -------------------------------------------------------------------

def test_empty_batch_gives_no_summaries():
    node, out = run_batch(SensorNode(0, CFG), [[] for _ in range(20)])
    assert out == [] and node.cursor == 20


def test_single_identity_gives_one_full_span_summary():
    node = SensorNode(0, CFG)
    _, out = run_batch(node, frames_by_index(walker(20, 0, 2, [1, 0, 0]), 20))
    assert len(out) == 1
    assert (out[0].first_frame, out[0].last_frame) == (0, 19)
    assert out[0].gallery.total == 20


def test_two_disjoint_identities_do_not_switch():
    dets = walker(20, 0, 2, [1, 0, 0], gt_id=0) + walker(20, 300, -2, [0, 1, 0], gt_id=1)
    node = SensorNode(0, CFG)
    _, out = run_batch(node, frames_by_index(dets, 20))
    assert len(out) == 2
    owner = {}
    for p in node.points:
        owner.setdefault(p.local_track_id, set()).add(round(p.box[0]) < 150)
    assert sorted(map(len, owner.values())) == [1, 1]


def test_batch_rejects_misplaced_detections():
    with pytest.raises(ValueError):
        SensorNode(0, CFG).run_batch([[det(3, (0, 0, 10, 20), [1, 0, 0])]])


# wire format -----------------------------------------------------------------

def test_header_only_message_is_twelve_bytes():
    assert HEADER_BYTES == 12
    assert len(encode_message(GalleryMessage(1, 0))) == 12


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_round_trip(seed):
    msg = random_message(np.random.default_rng(seed))
    wire = encode_message(msg)
    assert decode_message(wire, 3, 4) == msg
    assert len(wire) == msg.payload_bytes


def test_truncation_and_trailing_bytes_are_rejected(rng):
    wire = encode_message(random_message(np.random.default_rng(7)))
    assert len(wire) > HEADER_BYTES
    for cut in range(len(wire)):
        with pytest.raises(MalformedMessage):
            decode_message(wire[:cut], 3, 4)
    with pytest.raises(MalformedMessage):
        decode_message(wire + b"\0", 3, 4)


def test_bad_version_is_rejected():
    wire = bytearray(encode_message(GalleryMessage(1, 0)))
    wire[0] = 9
    with pytest.raises(MalformedMessage) as exc:
        decode_message(bytes(wire), 3, 4)
    assert exc.value.offset == 0


# run_system ------------------------------------------------------------------

def test_single_sensor_sends_nothing_and_matches_run_batch():
    dets = walker(40, 0, 2, [1, 0, 0], gt_id=0)
    res = run_system({0: dets}, CFG)
    assert all(r.total_bytes == 0 for r in res.reports)
    node = SensorNode(0, CFG)
    for lo in (0, 20):
        node.run_batch(frames_by_index(dets, 40)[lo:lo + 20])
    assert [(p.frame, p.local_track_id, p.box) for p in res.points] == \
        [(p.frame, p.local_track_id, p.box) for p in node.points]
    assert set(res.global_ids.values()) == {0}


def test_handoff_with_shared_embedding_gets_one_global_id():
    emb = [1.0, 0.5, 0.0]
    streams = {1: walker(20, 0, 2, emb, sensor=1),
               2: walker(20, 0, 2, emb, sensor=2, start=20)}
    res = run_system(streams, CFG)
    assert len({(p.sensor_id, p.local_track_id) for p in res.points}) == 2
    assert len(set(res.global_ids.values())) == 1


def test_payload_is_independent_of_batch_length():
    def bytes_for(T):
        cfg = CFG.replace(batch_len=T)
        streams = {s: walker(T, 0, 1, [1, 0, 0], sensor=s) + walker(T, 200, 1, [0, 1, 0], sensor=s)
                   for s in (1, 2)}
        res = run_system(streams, cfg)
        return res.reports[0], res.messages

    (short, wires), (long, _) = bytes_for(10), bytes_for(60)
    assert short.payload_bytes == long.payload_bytes
    for wire in wires:
        msg = decode_message(wire, 2, 3)
        slots = sum(4 + 4 * 3 * int(c > 0) for e in msg.entries for c in e.gallery.counts)
        assert len(wire) == 12 + 12 * len(msg.entries) + slots
        assert len(msg.entries) == 2
    assert long.full_gallery_features[1] == 6 * short.full_gallery_features[1]


def test_reports_are_deterministic_apart_from_wall_time():
    streams = {s: walker(30, 0, 2, [1, 0, 0], sensor=s) + walker(30, 100, -1, [0, 0, 1], sensor=s)
               for s in (1, 2, 3)}
    a = run_system(streams, CFG.replace(seed=5))
    b = run_system(streams, CFG.replace(seed=5))
    assert [r.to_json(timing=False) for r in a.reports] == [r.to_json(timing=False) for r in b.reports]
    assert a.messages == b.messages and a.tracks() == b.tracks()

"""Cross-sensor trajectory association over binned galleries."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .assignment import gated_assignment
from .core import Identity, RunConfig
from .gallery import BinnedGallery, gallery_distance, merge_all

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrackSummary:
    identity: Identity
    gallery: BinnedGallery
    first_frame: int
    last_frame: int

    def __post_init__(self):
        if self.gallery.total == 0:
            raise ValueError(f"track {self.identity.key} has an empty gallery")
        if self.first_frame > self.last_frame:
            raise ValueError(f"track {self.identity.key}: first_frame > last_frame")


@dataclass(frozen=True)
class MatchPair:
    track_a: Identity
    track_b: Identity
    distance: float


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple = ()

    def __post_init__(self):
        a = [p.track_a.key for p in self.pairs]
        b = [p.track_b.key for p in self.pairs]
        if len(set(a)) != len(a) or len(set(b)) != len(b):
            raise ValueError("a track appears in more than one pair")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def similarity(a: TrackSummary, b: TrackSummary, gamma: float) -> float:
    return math.exp(-gamma * gallery_distance(a.gallery, b.gallery))


def distance_matrix(sa: Sequence[TrackSummary], sb: Sequence[TrackSummary]) -> np.ndarray:
    D = np.empty((len(sa), len(sb)))
    for i, a in enumerate(sa):
        for j, b in enumerate(sb):
            D[i, j] = gallery_distance(a.gallery, b.gallery)
    return D


def associate_pair(sa: Sequence[TrackSummary], sb: Sequence[TrackSummary],
                   cfg: RunConfig) -> MatchSet:
    """One-to-one trajectory matching between two sensors.

    Minimising summed gallery distance maximises the product of pairwise
    similarities ``exp(-gamma * d)``; pairs farther apart than
    ``cfg.cs_threshold`` are left unmatched.
    """
    if not sa or not sb:
        return MatchSet()
    return match_from_distances(sa, sb, distance_matrix(sa, sb), cfg.cs_threshold)


def match_from_distances(sa, sb, D, threshold: float) -> MatchSet:
    pairs = gated_assignment(D, threshold)
    return MatchSet(tuple(MatchPair(sa[i].identity, sb[j].identity, float(D[i, j]))
                          for i, j in pairs))


def ring_schedule(sensor_ids: Iterable[int]) -> list[tuple[int, int]]:
    ids = sorted(sensor_ids)
    if len(ids) < 2:
        return []
    if len(ids) == 2:
        return [(ids[0], ids[1])]
    return [(ids[i], ids[(i + 1) % len(ids)]) for i in range(len(ids))]


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smallest key as root keeps the canonical member at the root
            lo, hi = (ra, rb) if ra < rb else (rb, ra)
            self.parent[hi] = lo


def components(matches: Iterable[MatchSet], nodes: Iterable[tuple] = ()) -> dict:
    """Map each (sensor_id, local_track_id) key to its component's smallest key."""
    uf = _UnionFind()
    for key in nodes:
        uf.find(key)
    for ms in matches:
        for p in ms:
            uf.union(p.track_a.key, p.track_b.key)
    return {k: uf.find(k) for k in uf.parent}


def resolve_identities(matches: Iterable[MatchSet],
                       identities: Iterable[Identity] = ()) -> dict[Identity, int]:
    """Global id for every identity touched by ``matches`` or listed in ``identities``.

    A component's global id is the packed id of its lexicographically
    smallest ``(sensor_id, local_track_id)``. A component holding two tracks
    of the same sensor is kept whole and logged.
    """
    matches = list(matches)
    keys = {i.key for i in identities}
    for ms in matches:
        for p in ms:
            keys.update((p.track_a.key, p.track_b.key))
    canon = components(matches, sorted(keys))
    members = defaultdict(list)
    for k, root in canon.items():
        members[root].append(k)
    for root, ks in members.items():
        sensors = [s for s, _ in ks]
        if len(set(sensors)) != len(sensors):
            log.warning("component %s holds several tracks of one sensor: %s", root, sorted(ks))
    return {Identity(s, t): Identity(*canon[(s, t)]).packed for s, t in sorted(canon)}


def merge_matched_galleries(summaries: Sequence[TrackSummary],
                            matches: Iterable[MatchSet]) -> list[TrackSummary]:
    """Give every track the merged gallery of its whole match component."""
    canon = components(matches, [s.identity.key for s in summaries])
    groups = defaultdict(list)
    for s in summaries:
        groups[canon[s.identity.key]].append(s)
    merged = {root: merge_all(s.gallery for s in sorted(grp, key=lambda s: s.identity.key))
              for root, grp in groups.items() if len(grp) > 1}
    return [replace(s, gallery=merged[canon[s.identity.key]])
            if canon[s.identity.key] in merged else s for s in summaries]


def foreign_priors(summaries: Sequence[TrackSummary],
                   matches: Iterable[MatchSet]) -> dict[tuple, BinnedGallery]:
    """For each matched track, the merge of the *other* members' galleries.

    The receiving track keeps absorbing its own detections, so its own gallery
    is left out here to avoid counting it twice.
    """
    canon = components(matches, [s.identity.key for s in summaries])
    groups = defaultdict(list)
    for s in summaries:
        groups[canon[s.identity.key]].append(s)
    out = {}
    for grp in groups.values():
        if len(grp) < 2:
            continue
        for s in grp:
            others = [o.gallery for o in grp if o.identity.key != s.identity.key]
            out[s.identity.key] = merge_all(others)
    return out

"""Relocalization against a previous map: match hypotheses, acceptance,
alignment and graph merging, plus map persistence.

A hypothesis is a chain of verified keyframe matches between the new and
the previous map whose keyframe ordinals advance in lock-step: consecutive
triples differ by exactly one keyframe in the new map and by the same
signed offset in the previous map.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from vislam.errors import AlreadyMerged, FormatError
from vislam.geometry import Pose, compose, inverse
from vislam.keyframe import KeyframeRecord
from vislam.posegraph import KeyframeNode, PoseGraph, loop_information

ACCEPT_MATCHES = 4
STALE_AFTER = 10
SIDECAR_MAGIC = b"VSLKFB"
SIDECAR_VERSION = 1


@dataclass(frozen=True)
class MatchTriple:
    """Verified match; ``rel`` is the pose of ``k_new`` in the frame of ``k_prev``.

    ``seq_new``/``seq_prev`` are the keyframes' ordinals within their maps
    (default: the ids themselves).
    """

    k_new: int
    k_prev: int
    rel: Pose
    seq_new: int | None = None
    seq_prev: int | None = None
    inliers: int = 0

    @property
    def s_new(self):
        return self.k_new if self.seq_new is None else self.seq_new

    @property
    def s_prev(self):
        return self.k_prev if self.seq_prev is None else self.seq_prev


@dataclass
class Hypothesis:
    triples: list = field(default_factory=list)
    last_extended: int = 0      # new-map ordinal of the last extension

    def __len__(self):
        return len(self.triples)

    @property
    def last(self) -> MatchTriple:
        return self.triples[-1]


@dataclass
class MapAlignment:
    """``transform`` maps new-map coordinates into the previous map's frame."""

    transform: Pose
    hypothesis: Hypothesis | None = None


def sequential(a: MatchTriple, b: MatchTriple) -> bool:
    """Lock-step rule between two triples (either direction)."""
    dn = b.s_new - a.s_new
    dp = b.s_prev - a.s_prev
    return abs(dn) == 1 and dn == dp


def process_match(hypotheses, m: MatchTriple, current=None, stale_after=STALE_AFTER):
    """Extend every hypothesis ending in a triple sequential with ``m``, add ``m`` as a
    new singleton, and prune hypotheses not extended for more than ``stale_after``
    new keyframes. ``current`` is the ordinal of the newest keyframe (default: m's)."""
    current = m.s_new if current is None else current
    out = []
    for h in hypotheses:
        if sequential(h.last, m):
            h = Hypothesis(h.triples + [m], m.s_new)
        out.append(h)
    out.append(Hypothesis([m], m.s_new))
    return prune(out, current, stale_after)


def prune(hypotheses, current, stale_after=STALE_AFTER):
    return [h for h in hypotheses if current - h.last_extended <= stale_after]


def check_accept(hypotheses, poses_prev, poses_new, threshold=ACCEPT_MATCHES):
    """Alignment from the most recent match of the best hypothesis with >= threshold triples.

    ``poses_prev``/``poses_new`` map keyframe ids to poses in their own map
    frames. Among qualifying hypotheses the longest wins, then the most
    recently extended.
    """
    best = None
    for h in hypotheses:
        if len(h) >= threshold:
            if best is None or (len(h), h.last_extended) > (len(best), best.last_extended):
                best = h
    if best is None:
        return None
    m = best.last
    T = compose(compose(poses_prev[m.k_prev], m.rel), inverse(poses_new[m.k_new]))
    return MapAlignment(T, best)


def merge_maps(prev: PoseGraph, new: PoseGraph, alignment: MapAlignment, cross_edges=None, optimize=True,
               information=None):
    """Combined graph: new nodes moved into the previous frame plus cross-map loop edges.

    ``cross_edges`` defaults to the triples of the accepted hypothesis. The
    gauge anchor of the previous map is kept; the new map's anchor is
    released. Raises AlreadyMerged if the graphs share a map id.
    """
    prev_maps = {n.map_id for n in prev.nodes.values()}
    new_maps = {n.map_id for n in new.nodes.values()}
    if prev_maps & new_maps:
        raise AlreadyMerged(f"maps {sorted(prev_maps & new_maps)} already part of the previous graph")
    if set(prev.nodes) & set(new.nodes):
        raise AlreadyMerged("node ids collide between the graphs")
    out = PoseGraph()
    for i, n in prev.nodes.items():
        out.nodes[i] = copy.copy(n)
    g = alignment.transform
    for i, n in new.nodes.items():
        m = copy.copy(n)
        m.pose = compose(g, n.pose)
        out.nodes[i] = m
    out.seq_edges = list(prev.seq_edges) + list(new.seq_edges)
    out.loop_edges = list(prev.loop_edges) + list(new.loop_edges)
    out.fixed = set(prev.fixed)
    if cross_edges is None:
        cross_edges = alignment.hypothesis.triples if alignment.hypothesis is not None else []
    info = loop_information() if information is None else information
    seen = set()
    for m in cross_edges:
        if (m.k_new, m.k_prev) in seen:
            continue
        seen.add((m.k_new, m.k_prev))
        out.add_loop_edge(m.k_new, m.k_prev, m.rel, info, m.inliers)
    result = out.optimize() if optimize else None
    return out, result


# ---------------------------------------------------------------------------
# persistence: g2o graph + binary keyframe sidecar

def write_sidecar(path, records):
    """Little-endian layout: magic[6], version u16, count u32, then per keyframe
    id i64, map_id i32, n u32, timestamp f64, landmark_ids i64[n],
    pixels f64[n*2], descriptors u8[n*32], points f64[n*3] (NaN = unknown)."""
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<HI", SIDECAR_VERSION, len(records)))
        for r in records:
            n = len(r.landmark_ids)
            fh.write(struct.pack("<qiId", int(r.id), int(r.map_id), n, float(r.timestamp)))
            fh.write(np.ascontiguousarray(r.landmark_ids, "<i8").tobytes())
            fh.write(np.ascontiguousarray(r.pixels, "<f8").tobytes())
            fh.write(np.ascontiguousarray(r.descriptors, np.uint8).tobytes())
            fh.write(np.ascontiguousarray(r.points, "<f8").tobytes())


def read_sidecar(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != SIDECAR_MAGIC:
        raise FormatError(f"{path}: not a keyframe sidecar")
    version, count = struct.unpack_from("<HI", data, 6)
    if version != SIDECAR_VERSION:
        raise FormatError(f"{path}: unsupported sidecar version {version}")
    off = 12
    out = []
    head = struct.calcsize("<qiId")
    try:
        for _ in range(count):
            kid, map_id, n, ts = struct.unpack_from("<qiId", data, off)
            off += head
            ids = np.frombuffer(data, "<i8", n, off).astype(np.int64)
            off += 8 * n
            pix = np.frombuffer(data, "<f8", 2 * n, off).reshape(n, 2).astype(float)
            off += 16 * n
            desc = np.frombuffer(data, np.uint8, 32 * n, off).reshape(n, 32).copy()
            off += 32 * n
            pts = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3).astype(float)
            off += 24 * n
            out.append(KeyframeRecord(kid, ts, Pose.identity(), ids, pix, desc, pts, map_id))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated sidecar ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in sidecar")
    return out


def save_map(graph: PoseGraph, path):
    """Write ``path`` (g2o text) and ``path + '.kfb'`` (keyframe sidecar)."""
    graph.write_g2o(path)
    records = []
    for i, n in graph.nodes.items():
        r = n.record
        if r is None:
            r = KeyframeRecord(i, n.timestamp, n.odom_pose, [], np.zeros((0, 2)), np.zeros((0, 32)),
                               np.zeros((0, 3)), n.map_id)
        records.append(KeyframeRecord(i, n.timestamp, n.odom_pose, r.landmark_ids, r.pixels, r.descriptors,
                                      r.points, n.map_id))
    write_sidecar(str(path) + ".kfb", records)


def load_map(path) -> PoseGraph:
    graph = PoseGraph.read_g2o(path)
    for r in read_sidecar(str(path) + ".kfb"):
        node = graph.nodes.get(r.id)
        if node is None:
            raise FormatError(f"{path}: sidecar keyframe {r.id} missing from graph")
        r.pose = node.odom_pose
        node.record = r
        node.landmark_ids = r.landmark_set
        node.descriptors = r.descriptors
    return graph


def new_node_from_record(record: KeyframeRecord, node_id, seq, pose=None) -> KeyframeNode:
    return KeyframeNode(node_id, record.pose if pose is None else pose, record.landmark_set, record.descriptors,
                        record.timestamp, record.map_id, seq, record.pose, record)

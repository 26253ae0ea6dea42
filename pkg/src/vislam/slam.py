"""SLAM stage: turns retired odometry keyframes into a pose graph, closes
loops through place recognition plus 2D-3D verification, relocalizes
against a previous map and publishes the odometry correction."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from vislam.camera import DEFAULT_CAMERA, PinholeCamera, body_T_cam
from vislam.errors import ConfigInvalid, NotEnoughCorrespondences, VerificationFailed
from vislam.geometry import Pose, compose, inverse, relative_pose
from vislam.geoverify import RansacConfig, ransac_pnp
from vislam.keyframe import KeyframeRecord, overlap_ratio
from vislam.posegraph import (LOOP_SIGMA_R, LOOP_SIGMA_T, SIGMA_R0, SIGMA_T0, PoseGraph, info_from_overlap,
                              loop_information)
from vislam.reloc import (ACCEPT_MATCHES, STALE_AFTER, MatchTriple, check_accept, merge_maps, new_node_from_record,
                          process_match, prune)
from vislam.retrieval import KeyframeIndex, Vocabulary, match_descriptors

MAP_ID_SHIFT = 40       # landmark ids are namespaced as (map_id << 40) + track id


@dataclass
class SlamConfig:
    min_score: float = 0.3
    top_k: int = 3
    min_seq_gap: int = 2
    match_max_distance: int = 64
    match_ratio: float = 0.8
    ransac: RansacConfig = field(default_factory=RansacConfig)
    sigma_t0: float = SIGMA_T0
    sigma_r0: float = SIGMA_R0
    loop_sigma_t: float = LOOP_SIGMA_T
    loop_sigma_r: float = LOOP_SIGMA_R
    accept_matches: int = ACCEPT_MATCHES
    stale_after: int = STALE_AFTER
    max_iters: int = 100
    guided: bool = True          # also verify the lock-step successor of live hypotheses
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.min_score <= 1.0:
            raise ConfigInvalid("min_score must lie in [0, 1]")
        if self.top_k < 1 or self.min_seq_gap < 2 or self.accept_matches < 1:
            raise ConfigInvalid("top_k >= 1, min_seq_gap >= 2 and accept_matches >= 1 required")
        if min(self.sigma_t0, self.sigma_r0, self.loop_sigma_t, self.loop_sigma_r) <= 0:
            raise ConfigInvalid("sigmas must be positive")
        return self


@dataclass
class Verification:
    relative_pose: Pose      # query body in the match keyframe's body frame
    inliers: int


def namespaced(ids, map_id):
    return frozenset((int(map_id) << MAP_ID_SHIFT) + int(i) for i in ids)


class SlamBackend:
    """Consumes keyframe records in order; ``on_keyframe`` returns the current correction."""

    def __init__(self, vocabulary: Vocabulary, config: SlamConfig | None = None,
                 camera: PinholeCamera = DEFAULT_CAMERA, prev_map: PoseGraph | None = None):
        self.config = (config if config is not None else SlamConfig()).validate()
        self.camera = camera
        self.cam_ext_inv = inverse(body_T_cam(0))
        self.index = KeyframeIndex(vocabulary)
        self.graph = PoseGraph()
        self.prev = prev_map
        self.map_id = 0
        self.id_offset = 0
        self.merged = False
        self.hypotheses = []
        self.first_match = None         # new-map ordinal of the first verified cross-map match
        self.events = []
        self.timings = []               # (keyframe id, ms, event)
        self.loop_count = 0
        self.optimized = False
        self.last_id = None
        self.last_record = None
        self.correction = Pose.identity()
        if prev_map is not None:
            self.map_id = max(prev_map.maps()) + 1
            self.id_offset = max(prev_map.nodes) + 1
            self._prev_by_seq = {(n.map_id, n.seq): i for i, n in prev_map.nodes.items()}
            for i, n in sorted(prev_map.nodes.items()):
                if n.record is not None:
                    self.index.add_keyframe(i, n.record.descriptors, namespaced(n.record.landmark_ids, n.map_id))

    # -- helpers -------------------------------------------------------------

    def _node(self, kid):
        n = self.graph.nodes.get(kid)
        if n is None and self.prev is not None and not self.merged:
            n = self.prev.nodes.get(kid)
        return n

    def _excluded(self, seq):
        """Same-map keyframes too close in sequence to form a loop."""
        gap = self.config.min_seq_gap
        return {n.id for n in self.graph.nodes.values() if n.map_id == self.map_id and abs(n.seq - seq) < gap}

    def _predicted(self, seq):
        """Previous-map keyframes that would extend a live hypothesis in lock-step."""
        if self.prev is None or self.merged or not self.config.guided:
            return []
        out = []
        for h in self.hypotheses:
            m = h.last
            if m.s_new == seq - 1:
                kid = self._prev_by_seq.get((self.prev.nodes[m.k_prev].map_id, m.s_prev + 1))
                if kid is not None and kid not in out:
                    out.append(kid)
        return out

    def verify(self, query: KeyframeRecord, match: KeyframeRecord, rng_key=()) -> Verification | None:
        """Descriptor matching against the match keyframe's 3D points, then RANSAC PnP."""
        cfg = self.config
        has = match.has_point
        pts, desc = match.points[has], match.descriptors[has]
        iq, it = match_descriptors(query.descriptors, desc, cfg.match_max_distance, cfg.match_ratio)
        if len(iq) < cfg.ransac.min_inliers:
            return None
        rng = np.random.default_rng([cfg.seed, *[int(k) for k in rng_key]])
        try:
            res = ransac_pnp(pts[it], query.pixels[iq], self.camera, cfg.ransac, rng)
        except (VerificationFailed, NotEnoughCorrespondences):
            return None
        return Verification(compose(res.relative_pose, self.cam_ext_inv), res.n_inliers)

    def _loop_info(self):
        return loop_information(self.config.loop_sigma_t, self.config.loop_sigma_r)

    # -- main entry ------------------------------------------------------------

    def on_keyframe(self, record: KeyframeRecord) -> Pose:
        """Add a retired keyframe, run loop closure / relocalization, return the correction."""
        t0 = time.perf_counter()
        cfg = self.config
        kid = int(record.id) + self.id_offset
        seq = 0 if self.last_id is None else self.graph.nodes[self.last_id].seq + 1
        record = KeyframeRecord(kid, record.timestamp, record.pose, record.landmark_ids, record.pixels,
                                record.descriptors, record.points, self.map_id, record.meta)
        node = new_node_from_record(record, kid, seq, compose(self.correction, record.pose))
        self.graph.add_node(node)
        if self.last_id is not None:
            prev = self.graph.nodes[self.last_id]
            meas = relative_pose(record.pose, prev.odom_pose)
            info = info_from_overlap(overlap_ratio(self.last_record, record), cfg.sigma_t0, cfg.sigma_r0)
            self.graph.add_seq_edge(self.last_id, kid, meas, info)
        landmarks = namespaced(record.landmark_ids, self.map_id)

        cands = self.index.query(record.descriptors, landmarks, top_k=None, min_score=cfg.min_score,
                                 exclude=self._excluded(seq))[:cfg.top_k]
        cands += [(c, 0.0) for c in self._predicted(seq) if c not in {c for c, _ in cands}]
        event = "none"
        n_loops = 0
        triples = []
        for cid, s in cands:
            other = self._node(cid)
            v = self.verify(record, other.record, (kid, cid))
            if v is None:
                continue
            if cid in self.graph.nodes:
                self.graph.add_loop_edge(kid, cid, v.relative_pose, self._loop_info(), v.inliers)
                self.events.append({"event": "loop", "keyframe": kid, "match": cid, "score": round(s, 6),
                                    "inliers": v.inliers, "timestamp": record.timestamp,
                                    "match_timestamp": other.timestamp})
                n_loops += 1
            else:
                triples.append(MatchTriple(kid, cid, v.relative_pose, seq, other.seq, v.inliers))
        if n_loops:
            self.loop_count += n_loops
            self.graph.optimize(max_iters=cfg.max_iters)
            self.optimized = True
            event = "loop"
        if self.prev is not None and not self.merged:
            if triples and self.first_match is None:
                self.first_match = seq
                self.events.append({"event": "first_match", "keyframe": kid, "match": triples[0].k_prev,
                                    "timestamp": record.timestamp})
            for m in triples:
                self.hypotheses = process_match(self.hypotheses, m, seq, cfg.stale_after)
            self.hypotheses = prune(self.hypotheses, seq, cfg.stale_after)
            align = check_accept(self.hypotheses, self.prev.poses(), self.graph.poses(), cfg.accept_matches)
            if align is not None:
                self.graph, _ = merge_maps(self.prev, self.graph, align, information=self._loop_info())
                self.merged = True
                self.optimized = True
                self.events.append({"event": "merge", "keyframe": kid, "timestamp": record.timestamp,
                                    "first_match_keyframe": self.first_match + self.id_offset,
                                    "latency_keyframes": seq - self.first_match,
                                    "matches": len(align.hypothesis),
                                    "transform": [*map(float, align.transform.q), *map(float, align.transform.t)]})
                self.hypotheses = []
                event = "merge"
        self.index.add_keyframe(kid, record.descriptors, landmarks)
        self.last_id, self.last_record = kid, record
        if self.optimized:
            self.correction = self.graph.correction(kid)
        self.timings.append((kid, (time.perf_counter() - t0) * 1e3, event))
        return self.correction

    # -- outputs --------------------------------------------------------------

    def current_map_nodes(self):
        return self.graph.map_nodes(self.map_id)

    def trajectory(self, map_id=None):
        """[(timestamp, pose)] of the graph nodes of one map (default: the current one)."""
        nodes = self.graph.map_nodes(self.map_id if map_id is None else map_id)
        return [(n.timestamp, n.pose) for n in nodes]

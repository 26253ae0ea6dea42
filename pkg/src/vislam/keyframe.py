"""The record a keyframe carries from odometry into the SLAM layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vislam.geometry import Pose


@dataclass
class KeyframeRecord:
    """Snapshot published by the odometry when a keyframe leaves its window.

    ``landmark_ids`` are odometry track ids (one per observation), not
    simulator ids: a place seen again after its tracks died gets fresh ids.
    ``points`` holds the landmark estimate in this keyframe's body frame, NaN
    where the landmark was never triangulated.
    """

    id: int
    timestamp: float
    pose: Pose
    landmark_ids: np.ndarray
    pixels: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray
    map_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
        n = len(self.landmark_ids)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(n, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(n, 32)
        self.points = np.asarray(self.points, dtype=float).reshape(n, 3)

    @property
    def landmark_set(self):
        return frozenset(int(i) for i in self.landmark_ids)

    @property
    def has_point(self):
        return np.all(np.isfinite(self.points), axis=1)


def overlap_ratio(a: KeyframeRecord, b: KeyframeRecord) -> float:
    """Jaccard overlap of the landmark id sets of two keyframes."""
    sa, sb = a.landmark_set, b.landmark_set
    union = len(sa | sb)
    return len(sa & sb) / union if union else 0.0

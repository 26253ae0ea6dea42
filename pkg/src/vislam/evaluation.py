"""Trajectory metrics and file formats.

TUM lines are ``timestamp tx ty tz qx qy qz qw``; timestamps are written
with nanosecond resolution and all other values with 9 significant digits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from vislam.errors import FormatError, MissingTimestamp, NoAssociation
from vislam.geometry import Pose, matrix_to_quat, quat_normalize

MAX_GAP = 0.02


@dataclass
class Trajectory:
    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.times) != len(self.poses):
            raise FormatError("times and poses differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise FormatError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs):
        pairs = sorted(pairs, key=lambda p: p[0])
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    def __len__(self):
        return len(self.times)

    @property
    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def nearest(self, t, max_gap=MAX_GAP):
        """Index of the sample closest to ``t`` or None if farther than ``max_gap``."""
        if not len(self.times):
            return None
        i = int(np.searchsorted(self.times, t))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self.times) and (best is None or abs(self.times[j] - t) < abs(self.times[best] - t)):
                best = j
        return best if abs(self.times[best] - t) <= max_gap else None

    def transformed(self, g: Pose):
        return Trajectory(self.times.copy(), [g @ p for p in self.poses])


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray
    alignment: Pose
    pairs: list = field(default_factory=list)   # (estimate index, truth index)


@dataclass
class CheckpointResult:
    pairs: list
    errors: np.ndarray
    mean: float


def associate(estimate: Trajectory, truth: Trajectory, max_gap=MAX_GAP):
    """Nearest-timestamp association, each truth sample used at most once."""
    out, used = [], set()
    for i, t in enumerate(estimate.times):
        j = truth.nearest(t, max_gap)
        if j is not None and j not in used:
            used.add(j)
            out.append((i, j))
    return out


def umeyama_se3(src, dst):
    """Rigid g minimizing sum |dst - g(src)|^2 (closed form, no scale)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    ms, md = src.mean(0), dst.mean(0)
    C = (dst - md).T @ (src - ms) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(matrix_to_quat(R), md - R @ ms)


def ate(estimate: Trajectory, truth: Trajectory, max_gap=MAX_GAP, align=True) -> AteResult:
    pairs = associate(estimate, truth, max_gap)
    if len(pairs) < 3:
        raise NoAssociation(f"only {len(pairs)} associated poses (need 3, max gap {max_gap} s)")
    P = estimate.positions[[i for i, _ in pairs]]
    Q = truth.positions[[j for _, j in pairs]]
    g = umeyama_se3(P, Q) if align else Pose.identity()
    err = np.linalg.norm(Q - (P @ g.R.T + g.t), axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), err, g, pairs)


def checkpoint_error(estimate: Trajectory, pairs, tol=1e-6) -> CheckpointResult:
    """Mean position gap between estimate samples at revisit timestamp pairs."""
    errs = []
    for ti, tj in pairs:
        i, j = estimate.nearest(ti, tol), estimate.nearest(tj, tol)
        if i is None or j is None:
            raise MissingTimestamp(f"checkpoint ({ti}, {tj}) not in the estimate")
        errs.append(np.linalg.norm(estimate.poses[i].t - estimate.poses[j].t))
    if not errs:
        raise MissingTimestamp("no checkpoint pairs given")
    errs = np.asarray(errs)
    return CheckpointResult(list(pairs), errs, float(errs.mean()))


# ---------------------------------------------------------------------------
# file formats

def format_tum_line(t, pose: Pose):
    w, x, y, z = pose.q
    vals = " ".join(f"{v:.9g}" for v in (*pose.t, x, y, z, w))
    return f"{t:.9f} {vals}"


def write_tum(path, traj: Trajectory):
    with open(path, "w") as fh:
        for t, p in zip(traj.times, traj.poses):
            fh.write(format_tum_line(t, p) + "\n")


def read_tum(path) -> Trajectory:
    times, poses = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            try:
                v = [float(s) for s in parts]
            except ValueError:
                raise FormatError(f"{path}:{n}: non-numeric field") from None
            times.append(v[0])
            poses.append(Pose(quat_normalize(np.array([v[7], v[4], v[5], v[6]])), np.array(v[1:4])))
    return Trajectory(times, poses)


def read_euroc_csv(path) -> Trajectory:
    """EuRoC ground truth: timestamp [ns], p_x, p_y, p_z, q_w, q_x, q_y, q_z, ... (extra columns ignored)."""
    times, poses = [], []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                v = [float(s) for s in row[:8]]
            except ValueError:
                raise FormatError(f"{path}:{n}: non-numeric field") from None
            if len(v) < 8:
                raise FormatError(f"{path}:{n}: expected at least 8 columns")
            times.append(v[0] * 1e-9)
            poses.append(Pose(quat_normalize(np.array(v[4:8])), np.array(v[1:4])))
    return Trajectory(times, poses)


def write_checkpoints(path, pairs):
    with open(path, "w") as fh:
        for a, b in pairs:
            fh.write(f"{a:.9f} {b:.9f}\n")


def read_checkpoints(path):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{n}: expected 't_i t_j'")
            out.append((float(parts[0]), float(parts[1])))
    return out

"""Sliding-window visual-inertial odometry.

The window holds the ``M`` most recent frames (pose + speed/bias) and up to
``N`` keyframes (pose only once they leave the recent set), plus the
landmarks they observe. Each new frame triggers a Gauss-Newton solve of the
joint visual/inertial/prior objective with landmarks eliminated by the Schur
complement, a keyframe decision and, if the window overflows, a
marginalization step that folds the leaving variables into the prior.

Marginalization rules:

* a recent keyframe leaving the recent set loses only its speed/bias block;
* a recent non-keyframe is removed entirely and its visual terms are dropped;
* the oldest keyframe beyond capacity is removed together with every
  landmark it observes (all their visual terms go into the prior), and its
  record is published to the SLAM layer.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from vislam.camera import DEFAULT_CAMERA, PinholeCamera, rig_extrinsics
from vislam.errors import ConfigInvalid, TrackingLost
from vislam.geometry import Pose, boxplus
from vislam.keyframe import KeyframeRecord
from vislam.vio.marginalization import LinearFactor, MarginalPrior, marginalize, prior_from_normal_equations
from vislam.vio.residuals import (MIN_DEPTH, ImuNoise, inertial_residual, make_inertial_term, propagate,
                                  visual_residuals)

logger = logging.getLogger(__name__)


@dataclass
class BodyState:
    pose: Pose
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    timestamp: float


@dataclass
class EstimatorConfig:
    max_recent: int = 3          # M
    max_keyframes: int = 7       # N
    pixel_sigma: float = 0.5
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    max_iterations: int = 10
    max_halvings: int = 20
    min_decrease: float = 1e-3
    keyframe_coverage: float = 0.5
    min_connected: int = 6
    min_parallax_deg: float = 0.3
    max_triangulation_error: float = 5.0   # px
    stereo_baseline: float = 0.11
    init: str = "truth"                    # 'truth' or 'origin'
    anchor_sigma: tuple = (1e-6, 1e-6)     # translation, rotation
    speed_bias_sigma: tuple = (0.01, 1e-3, 1e-2)  # velocity, gyro bias, accel bias

    def validate(self):
        if self.max_recent < 2 or self.max_keyframes < 1:
            raise ConfigInvalid("window needs at least 2 recent frames and 1 keyframe")
        if self.max_keyframes <= self.max_recent - 1:
            raise ConfigInvalid("max_keyframes must exceed max_recent - 1")
        if self.init not in ("truth", "origin"):
            raise ConfigInvalid(f"unknown init mode {self.init!r}")
        if self.pixel_sigma <= 0:
            raise ConfigInvalid("pixel_sigma must be positive")


@dataclass
class FrameState:
    fid: int
    timestamp: float
    pose: Pose
    speed_bias: np.ndarray
    tracks: np.ndarray
    cameras: np.ndarray
    pixels: np.ndarray
    descriptors: np.ndarray
    true_pose: Pose | None = None
    keyframe: bool = False
    visual_active: bool = True


@dataclass
class OptimizationWindow:
    """Resident variables of the sliding window."""

    frames: dict = field(default_factory=dict)        # fid -> FrameState
    recent: list = field(default_factory=list)        # fids, oldest first
    keyframes: list = field(default_factory=list)     # resident keyframe fids, oldest first
    landmarks: dict = field(default_factory=dict)     # track id -> 3-vector or None (pending)
    imu_terms: dict = field(default_factory=dict)     # fid_k -> InertialResidualTerm to next recent frame
    prior: MarginalPrior | None = None

    @property
    def recent_frames(self):
        return [self.frames[f] for f in self.recent]

    def resident(self):
        return sorted(set(self.recent) | set(self.keyframes))


# ---------------------------------------------------------------------------
# keyframe rule and triangulation

def hull_area(points) -> float:
    """Area of the 2D convex hull; 0 for fewer than 3 or collinear points."""
    pts = np.asarray(points, float).reshape(-1, 2)
    if len(pts) < 3:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def coverage_keyframe(pixels, camera: PinholeCamera = DEFAULT_CAMERA, fraction=0.5) -> bool:
    """True iff the hull of the projected landmarks covers less than ``fraction`` of the image."""
    return hull_area(pixels) < fraction * camera.image_area


def triangulate(centers, rotations, bearings):
    """Linear least-squares point from rays ``c_i + s * R_i b_i``.

    ``bearings`` are camera-frame direction vectors. Each ray contributes the
    two constraints orthogonal to it.
    """
    d = np.einsum("nij,nj->ni", rotations, bearings)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A = P.sum(axis=0)
    rhs = np.einsum("nij,nj->i", P, centers)
    return np.linalg.solve(A, rhs)


def max_parallax(centers, point):
    rays = point[None] - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cosang = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.arccos(cosang.min()))


# ---------------------------------------------------------------------------

class SlidingWindowVIO:
    """Keyframe-based sliding-window visual-inertial odometry.

    ``step`` consumes one :class:`~vislam.sim.FrameBundle` and returns the
    current body state expressed in the corrected world frame. Keyframes
    leaving the window are published via ``on_keyframe`` (a callable) and
    collected in ``published``.
    """

    def __init__(self, config: EstimatorConfig | None = None, camera: PinholeCamera = DEFAULT_CAMERA,
                 on_keyframe=None):
        self.config = config if config is not None else EstimatorConfig()
        self.config.validate()
        self.camera = camera
        self.rig = rig_extrinsics(self.config.stereo_baseline)
        self._R_bc = np.stack([r for r, _ in self.rig])
        self._t_bc = np.stack([t for _, t in self.rig])
        self.window = OptimizationWindow()
        self.on_keyframe = on_keyframe
        self.published = []
        self.timings = []          # (frame index, ms)
        self.trajectory = []       # (timestamp, corrected pose)
        self.cost_history = []     # per step: list of accepted costs
        self.correction = Pose.identity()
        self._pending_correction = None
        self._track_of_sim = {}
        self._next_track = 0
        self._next_keyframe_id = 0
        self._keyframe_ids = {}    # fid -> published keyframe id
        self._last_fid = None
        self._origin = None
        self.initialized = False

    # -- public -----------------------------------------------------------

    def set_correction(self, g: Pose):
        """Queue a world correction; it takes effect before the next step."""
        self._pending_correction = g

    def step(self, bundle) -> BodyState:
        t0 = time.perf_counter()
        if self._pending_correction is not None:
            self.correction = self._pending_correction
            self._pending_correction = None
        w = self.window
        if self._last_fid is not None and bundle.timestamp <= w.frames[self._last_fid].timestamp:
            raise ConfigInvalid("frame timestamps must increase")
        if not self.initialized:
            self._initialize(bundle)
        else:
            self._add_frame(bundle)
            self._triangulate_pending()
            self._check_connected(bundle.index)
            self._optimize()
        fid = bundle.index
        frame = w.frames[fid]
        frame.keyframe = (not w.keyframes) or self.keyframe_decision(fid)
        if frame.keyframe:
            w.keyframes.append(fid)
            self._keyframe_ids[fid] = self._next_keyframe_id
            self._next_keyframe_id += 1
        self._enforce_capacity()
        state = self.state(fid)
        self.trajectory.append((state.timestamp, state.pose))
        self.timings.append((fid, 1000.0 * (time.perf_counter() - t0)))
        return state

    def state(self, fid=None, corrected=True) -> BodyState:
        w = self.window
        fid = w.recent[-1] if fid is None else fid
        f = w.frames[fid]
        pose = self.correction @ f.pose if corrected else f.pose
        sb = f.speed_bias
        return BodyState(pose, sb[0:3].copy(), sb[3:6].copy(), sb[6:9].copy(), f.timestamp)

    def keyframe_decision(self, fid) -> bool:
        """Coverage rule on landmarks of frame ``fid`` shared with a resident keyframe."""
        w = self.window
        f = w.frames[fid]
        shared = set()
        for k in w.keyframes:
            if k != fid and w.frames[k].visual_active:
                shared.update(int(t) for t in w.frames[k].tracks)
        sel = [n for n, (t, c) in enumerate(zip(f.tracks, f.cameras))
               if c == 0 and int(t) in shared and w.landmarks.get(int(t)) is not None]
        if not sel:
            return True
        pts = np.stack([w.landmarks[int(f.tracks[n])] for n in sel])
        p_b = (pts - f.pose.t) @ f.pose.R
        p_c = (p_b - self._t_bc[0]) @ self._R_bc[0]
        ok = p_c[:, 2] > MIN_DEPTH
        uv = self.camera.project(p_c[ok]) if ok.any() else np.zeros((0, 2))
        return coverage_keyframe(uv, self.camera, self.config.keyframe_coverage)

    def flush(self):
        """Publish every resident keyframe not yet published (end of sequence)."""
        out = [self._publish(fid) for fid in list(self.window.keyframes)]
        return [r for r in out if r is not None]

    # -- setup ------------------------------------------------------------

    def _initialize(self, bundle):
        cfg = self.config
        w = self.window
        pose = bundle.true_pose
        if cfg.init == "origin":
            from vislam.sim import _yaw_origin_transform
            self._origin = _yaw_origin_transform(pose)
            pose = self._origin @ pose
        sb = np.concatenate([bundle.true_velocity, bundle.true_gyro_bias, bundle.true_accel_bias]) \
            if cfg.init == "truth" else np.concatenate([bundle.true_velocity, np.zeros(6)])
        frame = self._make_frame(bundle, pose, sb)
        w.frames[frame.fid] = frame
        w.recent.append(frame.fid)
        st, sr = cfg.anchor_sigma
        sv, sg, sa = cfg.speed_bias_sigma
        sig = np.concatenate([np.full(3, st), np.full(3, sr), np.full(3, sv), np.full(3, sg), np.full(3, sa)])
        keys = [("T", frame.fid), ("S", frame.fid)]
        w.prior = MarginalPrior(keys, [6, 9], np.diag(1.0 / sig), np.zeros(15),
                                {keys[0]: pose, keys[1]: sb.copy()})
        self._triangulate_pending()
        self._last_fid = frame.fid
        self.initialized = True

    def _make_frame(self, bundle, pose, sb):
        tracks = np.empty(len(bundle.landmark_ids), dtype=np.int64)
        for n, lid in enumerate(bundle.landmark_ids):
            tid = self._track_of_sim.get(int(lid))
            if tid is None:
                tid = self._next_track
                self._next_track += 1
                self._track_of_sim[int(lid)] = tid
                self.window.landmarks[tid] = None
            tracks[n] = tid
        return FrameState(bundle.index, float(bundle.timestamp), pose, np.asarray(sb, float).copy(), tracks,
                          np.asarray(bundle.cameras, int), np.asarray(bundle.pixels, float),
                          np.asarray(bundle.descriptors, np.uint8), bundle.true_pose)

    def _add_frame(self, bundle):
        w = self.window
        prev = w.frames[w.recent[-1]]
        sb = prev.speed_bias
        prop = propagate(prev.pose.R, prev.pose.t, sb[0:3], sb[3:6], sb[6:9], bundle.imu_t, bundle.gyro,
                         bundle.accel, jacobian=False)
        pose = Pose.from_rt(prop.R, prop.p)
        new_sb = np.concatenate([prop.R.T @ prop.v, sb[3:9]])
        frame = self._make_frame(bundle, pose, new_sb)
        state_k = (prev.pose, sb[0:3], sb[3:6], sb[6:9])
        w.imu_terms[prev.fid] = make_inertial_term(prev.fid, frame.fid, state_k, bundle.imu_t, bundle.gyro,
                                                   bundle.accel, self.config.imu_noise)
        w.frames[frame.fid] = frame
        w.recent.append(frame.fid)
        self._last_fid = frame.fid

    # -- observations -----------------------------------------------------

    def _observations(self):
        """Active observations of resident frames: (fid, cam, track, pixel) arrays."""
        w = self.window
        fids, cams, tracks, pix = [], [], [], []
        for fid in w.resident():
            f = w.frames[fid]
            if not f.visual_active or len(f.tracks) == 0:
                continue
            fids.append(np.full(len(f.tracks), fid))
            cams.append(f.cameras)
            tracks.append(f.tracks)
            pix.append(f.pixels)
        if not fids:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0, np.int64), np.zeros((0, 2))
        return np.concatenate(fids), np.concatenate(cams), np.concatenate(tracks), np.concatenate(pix)

    def _triangulate_pending(self):
        w = self.window
        ofid, ocam, otr, opix = self._observations()
        pending = [t for t, v in w.landmarks.items() if v is None]
        if not pending or len(otr) == 0:
            return
        order = np.argsort(otr, kind="stable")
        otr_s = otr[order]
        min_par = np.deg2rad(self.config.min_parallax_deg)
        bearings_all = np.column_stack([(opix[:, 0] - self.camera.cx) / self.camera.fx,
                                        (opix[:, 1] - self.camera.cy) / self.camera.fy, np.ones(len(opix))])
        for tid in pending:
            lo, hi = np.searchsorted(otr_s, [tid, tid + 1])
            if hi - lo < 2:
                continue
            idx = order[lo:hi]
            R_wc, c_w = [], []
            for fid, cam in zip(ofid[idx], ocam[idx]):
                f = w.frames[int(fid)]
                R_wc.append(f.pose.R @ self._R_bc[cam])
                c_w.append(f.pose.act(self._t_bc[cam]))
            R_wc, c_w = np.stack(R_wc), np.stack(c_w)
            try:
                X = triangulate(c_w, R_wc, bearings_all[idx])
            except np.linalg.LinAlgError:
                continue
            if max_parallax(c_w, X) < min_par:
                continue
            p_c = np.einsum("nji,nj->ni", R_wc, X[None] - c_w)
            if np.any(p_c[:, 2] <= 0.1):
                continue
            err = np.linalg.norm(self.camera.project(p_c) - opix[idx], axis=1)
            if err.max() > self.config.max_triangulation_error:
                continue
            w.landmarks[tid] = X

    def _check_connected(self, fid):
        w = self.window
        f = w.frames[fid]
        others = set()
        for g in w.resident():
            if g != fid and w.frames[g].visual_active:
                others.update(int(t) for t in w.frames[g].tracks)
        n = sum(1 for t in f.tracks if int(t) in others and w.landmarks.get(int(t)) is not None)
        if n < self.config.min_connected:
            raise TrackingLost(f"frame {fid}: only {n} landmark observations connect to the window")

    # -- optimization -----------------------------------------------------

    def _layout(self):
        w = self.window
        poses = w.resident()
        speeds = list(w.recent)
        pidx = {f: i for i, f in enumerate(poses)}
        sidx = {f: i for i, f in enumerate(speeds)}
        slices = {}
        for f, i in pidx.items():
            slices[("T", f)] = slice(6 * i, 6 * i + 6)
        base = 6 * len(poses)
        for f, i in sidx.items():
            slices[("S", f)] = slice(base + 9 * i, base + 9 * i + 9)
        return poses, speeds, pidx, slices, base + 9 * len(speeds)

    def _visual_set(self, pidx):
        """Observations used by the solver: landmarks estimated with >= 2 observations."""
        w = self.window
        ofid, ocam, otr, opix = self._observations()
        est = np.array([w.landmarks.get(int(t)) is not None for t in otr], bool)
        ofid, ocam, otr, opix = ofid[est], ocam[est], otr[est], opix[est]
        uniq, inv, counts = np.unique(otr, return_inverse=True, return_counts=True)
        keep = counts[inv] >= 2
        uniq2 = uniq[counts >= 2]
        lidx = {int(t): i for i, t in enumerate(uniq2)}
        oL = np.array([lidx[int(t)] for t in otr[keep]], dtype=int)
        oF = np.array([pidx[int(f)] for f in ofid[keep]], dtype=int)
        return oF, ocam[keep], oL, opix[keep], [int(t) for t in uniq2]

    def _values(self):
        w = self.window
        vals = {}
        for f in w.resident():
            vals[("T", f)] = w.frames[f].pose
        for f in w.recent:
            vals[("S", f)] = w.frames[f].speed_bias
        return vals

    def _imu_pairs(self):
        w = self.window
        return [(k, k1) for k, k1 in zip(w.recent[:-1], w.recent[1:]) if k in w.imu_terms]

    @staticmethod
    def _tuple(pose, sb):
        return (pose, sb[0:3], sb[3:6], sb[6:9])

    def _cost(self, poses, sbs, lms, vis):
        oF, oC, oL, oP, _ = vis
        w = self.window
        total = 0.0
        if len(oF):
            R = np.stack([p.R for p in poses])
            t = np.stack([p.t for p in poses])
            r, _, _, z = visual_residuals(R[oF], t[oF], self._R_bc[oC], self._t_bc[oC], lms[oL], oP, self.camera,
                                          jacobians=False)
            if np.any(z <= MIN_DEPTH):
                return np.inf
            total += float(np.sum(r * r)) / self.config.pixel_sigma**2
        pidx = {f: i for i, f in enumerate(w.resident())}
        for k, k1 in self._imu_pairs():
            term = w.imu_terms[k]
            r = inertial_residual(term, self._tuple(poses[pidx[k]], sbs[k]), self._tuple(poses[pidx[k1]], sbs[k1]),
                                  jacobians=False)
            total += float(r @ term.information @ r)
        if w.prior is not None:
            vals = {}
            for key in w.prior.keys:
                vals[key] = poses[pidx[key[1]]] if key[0] == "T" else sbs[key[1]]
            total += w.prior.cost(vals)
        return total

    def _optimize(self):
        cfg = self.config
        w = self.window
        poses_f, speeds_f, pidx, slices, nx = self._layout()
        vis = self._visual_set(pidx)
        oF, oC, oL, oP, ltracks = vis
        F = len(poses_f)
        L = len(ltracks)
        poses = [w.frames[f].pose for f in poses_f]
        sbs = {f: w.frames[f].speed_bias.copy() for f in speeds_f}
        lms = np.stack([w.landmarks[t] for t in ltracks]) if L else np.zeros((0, 3))
        wpix = 1.0 / cfg.pixel_sigma**2
        cost = self._cost(poses, sbs, lms, vis)
        history = [cost]
        for _ in range(cfg.max_iterations):
            H = np.zeros((nx, nx))
            b = np.zeros(nx)
            # inertial
            for k, k1 in self._imu_pairs():
                term = w.imu_terms[k]
                r, Jk, Jk1 = inertial_residual(term, self._tuple(poses[pidx[k]], sbs[k]),
                                               self._tuple(poses[pidx[k1]], sbs[k1]))
                blocks = [(slices[("T", k)], Jk[:, :6]), (slices[("S", k)], Jk[:, 6:]),
                          (slices[("T", k1)], Jk1[:, :6]), (slices[("S", k1)], Jk1[:, 6:])]
                _accumulate(H, b, blocks, r, term.information)
            # prior
            if w.prior is not None:
                vals = {key: (poses[pidx[key[1]]] if key[0] == "T" else sbs[key[1]]) for key in w.prior.keys}
                r, jacs = w.prior.evaluate(vals)
                _accumulate(H, b, [(slices[key], J) for key, J in zip(w.prior.keys, jacs)], r, None)
            # visual, landmarks eliminated
            if L:
                R = np.stack([p.R for p in poses])
                t = np.stack([p.t for p in poses])
                r, Jp, Jl, _ = visual_residuals(R[oF], t[oF], self._R_bc[oC], self._t_bc[oC], lms[oL], oP,
                                                self.camera)
                Hpp = np.zeros((F, 6, 6))
                np.add.at(Hpp, oF, wpix * np.einsum("nki,nkj->nij", Jp, Jp))
                bp = np.zeros((F, 6))
                np.add.at(bp, oF, wpix * np.einsum("nki,nk->ni", Jp, r))
                Hll = np.zeros((L, 3, 3))
                np.add.at(Hll, oL, wpix * np.einsum("nki,nkj->nij", Jl, Jl))
                bl = np.zeros((L, 3))
                np.add.at(bl, oL, wpix * np.einsum("nki,nk->ni", Jl, r))
                Wpl = np.zeros((F, L, 6, 3))
                np.add.at(Wpl, (oF, oL), wpix * np.einsum("nki,nkj->nij", Jp, Jl))
                Hll_inv = np.linalg.inv(Hll + 1e-9 * np.eye(3)[None])
                V = Wpl @ Hll_inv[None]
                Vm = V.transpose(0, 2, 1, 3).reshape(6 * F, 3 * L)
                Wm = Wpl.transpose(0, 2, 1, 3).reshape(6 * F, 3 * L)
                S = Vm @ Wm.T
                for i in range(F):
                    H[6 * i:6 * i + 6, 6 * i:6 * i + 6] += Hpp[i]
                    b[6 * i:6 * i + 6] += bp[i]
                H[:6 * F, :6 * F] -= S
                b[:6 * F] -= Vm @ bl.reshape(-1)
            H = 0.5 * (H + H.T)
            try:
                dx = np.linalg.solve(H + 1e-12 * np.eye(nx), -b)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(H, -b, rcond=None)[0]
            # predicted decrease of the quadratic model; stop when negligible
            if -float(b @ dx) < cfg.min_decrease:
                break
            if L:
                rhs = bl + (Wm.T @ dx[:6 * F]).reshape(L, 3)
                dl = -np.einsum("lij,lj->li", Hll_inv, rhs)
            else:
                dl = np.zeros((0, 3))
            alpha = 1.0
            accepted = False
            for _h in range(cfg.max_halvings + 1):
                cand_p = [boxplus(p, alpha * dx[6 * i:6 * i + 6]) for i, p in enumerate(poses)]
                cand_s = {f: sbs[f] + alpha * dx[slices[("S", f)]] for f in speeds_f}
                cand_l = lms + alpha * dl
                c_new = self._cost(cand_p, cand_s, cand_l, vis)
                if c_new < cost:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            rel = (cost - c_new) / max(cost, 1e-300)
            poses, sbs, lms, cost = cand_p, cand_s, cand_l, c_new
            history.append(cost)
            if rel < 1e-10 or alpha * np.linalg.norm(dx) < 1e-10:
                break
        for f, p in zip(poses_f, poses):
            w.frames[f].pose = p
        for f in speeds_f:
            w.frames[f].speed_bias = sbs[f]
        for t, x in zip(ltracks, lms):
            w.landmarks[t] = x
        self.cost_history.append(history)

    # -- marginalization --------------------------------------------------

    def _enforce_capacity(self):
        cfg = self.config
        w = self.window
        while len(w.recent) > cfg.max_recent:
            fid = w.recent[0]
            if w.frames[fid].keyframe:
                self.marginalize([("S", fid)])
            else:
                self.marginalize([("T", fid), ("S", fid)], drop_visual=[fid])
        while len(w.keyframes) > cfg.max_keyframes:
            fid = w.keyframes[0]
            if fid in w.recent:
                break
            self._publish(fid)
            # landmarks seen by a single observation carry no usable information; drop them
            _, _, otr, _ = self._observations()
            counts = dict(zip(*np.unique(otr, return_counts=True)))
            tracks = sorted(int(t) for t in set(w.frames[fid].tracks.tolist())
                            if w.landmarks.get(int(t)) is not None and counts.get(t, 0) >= 2)
            for t in set(w.frames[fid].tracks.tolist()) - set(tracks):
                w.landmarks[int(t)] = None
            self.marginalize([("T", fid)] + [("L", t) for t in tracks])
        self._prune_tracks()

    def marginalize(self, victims, drop_visual=()):
        """Schur-complement ``victims`` out of the window into the prior.

        Victim keys are ``("T", fid)``, ``("S", fid)`` or ``("L", track)``.
        All terms touching a victim are linearized at the current estimates;
        the new prior's linearization point is the current estimate of every
        retained variable it touches. Visual terms of ``drop_visual`` frames
        are discarded instead of marginalized.
        """
        w = self.window
        victims = list(victims)
        vset = set(victims)
        for fid in drop_visual:
            w.frames[fid].visual_active = False
        values = self._values()
        for key in vset:
            if key[0] == "L":
                values[key] = w.landmarks[key[1]]
        dims = {}
        factors = []
        touched_frames = {k[1] for k in vset if k[0] in ("T", "S")}
        if w.prior is not None:
            factors.append(w.prior.as_factor(values))
        for k, k1 in self._imu_pairs():
            if k in touched_frames or k1 in touched_frames:
                term = w.imu_terms[k]
                sk, sk1 = values[("S", k)], values[("S", k1)]
                r, Jk, Jk1 = inertial_residual(term, self._tuple(values[("T", k)], sk),
                                               self._tuple(values[("T", k1)], sk1))
                factors.append(LinearFactor([("T", k), ("S", k), ("T", k1), ("S", k1)],
                                            [Jk[:, :6], Jk[:, 6:], Jk1[:, :6], Jk1[:, 6:]], r, term.information))
        lm_victims = {k[1] for k in vset if k[0] == "L"}
        frame_victims = {k[1] for k in vset if k[0] == "T"}
        if lm_victims or frame_victims:
            factors.extend(self._visual_factors(values, lm_victims, frame_victims))
        for f in factors:
            for key in f.keys:
                dims[key] = 6 if key[0] == "T" else (9 if key[0] == "S" else 3)
        for key in vset:
            dims.setdefault(key, 6 if key[0] == "T" else (9 if key[0] == "S" else 3))
        kept, H, b = marginalize(factors, [k for k in victims if k in dims], dims)
        kept = [k for k in kept if k not in vset]
        w.prior = prior_from_normal_equations(kept, dims, H, b, values) if kept else None
        # structural removal
        for key in vset:
            kind, ident = key
            if kind == "S":
                w.imu_terms.pop(ident, None)
                prev = [k for k, t in w.imu_terms.items() if t.frame_k1 == ident]
                for k in prev:
                    del w.imu_terms[k]
                if ident in w.recent:
                    w.recent.remove(ident)
            elif kind == "T":
                if ident in w.recent:
                    w.recent.remove(ident)
                if ident in w.keyframes:
                    w.keyframes.remove(ident)
                w.frames.pop(ident, None)
            else:
                w.landmarks.pop(ident, None)
        for key in vset:
            if key[0] == "L":
                for f in w.frames.values():
                    m = f.tracks != key[1]
                    if not m.all():
                        f.tracks, f.cameras, f.pixels, f.descriptors = (f.tracks[m], f.cameras[m], f.pixels[m],
                                                                        f.descriptors[m])
        return w.prior

    def _visual_factors(self, values, lm_victims, frame_victims):
        """Linearized visual terms touching victim landmarks or victim frames."""
        w = self.window
        ofid, ocam, otr, opix = self._observations()
        sel = []
        for n, (f, t) in enumerate(zip(ofid, otr)):
            t = int(t)
            if w.landmarks.get(t) is None:
                continue
            if t in lm_victims or int(f) in frame_victims:
                sel.append(n)
        if not sel:
            return []
        sel = np.array(sel)
        ofid, ocam, otr, opix = ofid[sel], ocam[sel], otr[sel], opix[sel]
        R = np.stack([values[("T", int(f))].R for f in ofid])
        t = np.stack([values[("T", int(f))].t for f in ofid])
        X = np.stack([w.landmarks[int(tr)] for tr in otr])
        r, Jp, Jl, z = visual_residuals(R, t, self._R_bc[ocam], self._t_bc[ocam], X, opix, self.camera)
        info = np.eye(2) / self.config.pixel_sigma**2
        out = []
        for n in range(len(sel)):
            if z[n] <= MIN_DEPTH:
                continue
            out.append(LinearFactor([("T", int(ofid[n])), ("L", int(otr[n]))], [Jp[n], Jl[n]], r[n], info))
        return out

    def _prune_tracks(self):
        """Kill tracks that no resident frame observes any more."""
        w = self.window
        alive = set()
        for fid in w.resident():
            f = w.frames[fid]
            if f.visual_active:
                alive.update(int(t) for t in f.tracks)
        for t in [t for t in w.landmarks if t not in alive]:
            del w.landmarks[t]
        self._track_of_sim = {s: t for s, t in self._track_of_sim.items() if t in alive}
        for fid in list(w.frames):
            if fid not in w.recent and fid not in w.keyframes:
                del w.frames[fid]

    # -- publishing -------------------------------------------------------

    def _publish(self, fid) -> KeyframeRecord:
        w = self.window
        f = w.frames[fid]
        kid = self._keyframe_ids.get(fid)
        if kid is None:
            return None
        m = f.cameras == 0
        tracks = f.tracks[m]
        pts = np.full((len(tracks), 3), np.nan)
        for n, t in enumerate(tracks):
            x = w.landmarks.get(int(t))
            if x is not None:
                pts[n] = f.pose.R.T @ (x - f.pose.t)
        meta = {"frame": fid}
        if f.true_pose is not None:
            meta["true_pose"] = f.true_pose
        rec = KeyframeRecord(kid, f.timestamp, f.pose, tracks, f.pixels[m], f.descriptors[m], pts, meta=meta)
        self._keyframe_ids.pop(fid, None)
        self.published.append(rec)
        if self.on_keyframe is not None:
            self.on_keyframe(rec)
        return rec


def _accumulate(H, b, blocks, r, information):
    """Add one factor ``(J_i blocks, r, W)`` to dense normal equations."""
    Wr = r if information is None else information @ r
    WJ = [J if information is None else information @ J for _, J in blocks]
    for (sa, Ja), _ in zip(blocks, WJ):
        b[sa] += Ja.T @ Wr
        for (sb, _Jb), WJb in zip(blocks, WJ):
            H[sa, sb] += Ja.T @ WJb

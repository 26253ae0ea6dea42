"""Deterministic synthetic world: trajectories, landmarks, camera and IMU data.

Trajectories are analytic curves, so positions, velocities, accelerations and
body rates are exact and the IMU stream follows by differentiation. Body
attitude is yaw-only (gravity stays along body -z up to yaw), which is the
regime of a hand-held or wheeled rig.

Besides the full frame stream used by the odometry, :func:`simulate_keyframes`
emits keyframe records with a configurable odometry drift directly. That path
feeds the SLAM layer at scales where running the sliding-window odometry over
thousands of frames would be too slow for a test suite.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from vislam.camera import DEFAULT_CAMERA, PinholeCamera, rig_extrinsics
from vislam.errors import ConfigInvalid, NoRevisits
from vislam.geometry import Pose, quat_from_rotvec, quat_to_matrix, relative_pose, rotation_angle
from vislam.keyframe import KeyframeRecord

GRAVITY = np.array([0.0, 0.0, -9.81])
TRAJECTORY_KINDS = ("circle", "figure_eight", "out_and_back", "script")


@dataclass
class WorldConfig:
    """World and sensor rig description.

    Camera intrinsics are fixed (fx = fy = 400, cx = 320, cy = 240, 640x480).
    ``script`` is only used by the ``script`` trajectory kind: waypoints
    ``"t x y z yaw; t x y z yaw; ..."`` joined by minimum-jerk segments.
    """

    seed: int = 0
    trajectory_kind: str = "circle"
    trajectory_scale: float = 3.0
    duration: float = 60.0
    camera_rate: float = 20.0
    imu_rate: float = 200.0
    landmark_count: int = 600
    landmark_shell: tuple = (6.0, 10.0)
    stereo_baseline: float = 0.11
    loop_period: float = 30.0
    landmark_max_elevation: float = 0.5
    max_range: float = 25.0
    script: str = ""

    def __post_init__(self):
        self.landmark_shell = tuple(float(v) for v in self.landmark_shell)
        self.validate()

    @property
    def imu_per_frame(self):
        return int(round(self.imu_rate / self.camera_rate))

    @property
    def n_frames(self):
        return int(round(self.duration * self.camera_rate))

    def frame_times(self):
        return np.arange(self.n_frames) / self.camera_rate

    def validate(self):
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ConfigInvalid(f"unknown trajectory_kind {self.trajectory_kind!r}")
        if self.camera_rate <= 0 or self.imu_rate <= 0 or self.duration <= 0:
            raise ConfigInvalid("rates and duration must be positive")
        ratio = self.imu_rate / self.camera_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigInvalid("imu_rate must be an integer multiple of camera_rate")
        lo, hi = self.landmark_shell
        if not (0 < lo <= hi):
            raise ConfigInvalid("landmark_shell must satisfy 0 < min <= max")
        if self.landmark_count < 0 or self.stereo_baseline < 0:
            raise ConfigInvalid("landmark_count and stereo_baseline must be nonnegative")
        if self.trajectory_kind == "script":
            _parse_script(self.script)
        if self.loop_period <= 0:
            raise ConfigInvalid("loop_period must be positive")


@dataclass
class NoiseModel:
    """Sensor noise; IMU terms are continuous-time densities."""

    pixel_sigma: float = 0.5
    gyro_sigma: float = 1.7e-4
    accel_sigma: float = 2.0e-3
    gyro_bias_walk: float = 1.9e-5
    accel_bias_walk: float = 3.0e-4
    descriptor_flip_prob: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigInvalid(f"noise parameter {f.name} must be nonnegative")
        if self.descriptor_flip_prob > 1:
            raise ConfigInvalid("descriptor_flip_prob must be a probability")

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class OdometryDrift:
    """Drift injected into simulated keyframe odometry.

    ``yaw_rate`` and ``scale_error`` are systematic (a gyro-bias-like heading
    drift and a scale error); the sigmas are per-keyframe random increments.
    """

    yaw_rate: float = 0.004
    scale_error: float = 0.01
    trans_sigma: float = 0.003
    rot_sigma: float = 0.0005
    point_sigma: float = 0.01


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray
    descriptor: np.ndarray


@dataclass(eq=False)
class FrameBundle:
    """One camera frame: observations plus the IMU samples since the last frame.

    ``imu_t``/``gyro``/``accel`` include both the previous and the current
    frame timestamps as endpoints (a single sample for the first frame).
    """

    index: int
    timestamp: float
    true_pose: Pose
    landmark_ids: np.ndarray
    cameras: np.ndarray
    pixels: np.ndarray
    descriptors: np.ndarray
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    true_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def observations(self):
        return [(int(i), int(c), p, d) for i, c, p, d in
                zip(self.landmark_ids, self.cameras, self.pixels, self.descriptors)]

    @property
    def imu_segment(self):
        return [(t, g, a) for t, g, a in zip(self.imu_t, self.gyro, self.accel)]


@dataclass
class SimRun:
    config: WorldConfig
    noise: NoiseModel
    landmark_ids: np.ndarray
    landmark_positions: np.ndarray
    landmark_descriptors: np.ndarray
    frames: list
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    @property
    def landmarks(self):
        return [Landmark(int(i), p, d) for i, p, d in
                zip(self.landmark_ids, self.landmark_positions, self.landmark_descriptors)]

    @property
    def ground_truth(self):
        return [(f.timestamp, f.true_pose) for f in self.frames]


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectorySample:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    yaw: np.ndarray
    yaw_rate: np.ndarray


def _parse_script(text):
    rows = [r.strip() for r in text.replace("\n", ";").split(";") if r.strip()]
    if len(rows) < 2:
        raise ConfigInvalid("script trajectory needs at least two waypoints")
    try:
        way = np.array([[float(x) for x in r.replace(",", " ").split()] for r in rows])
    except ValueError as exc:
        raise ConfigInvalid(f"bad script waypoint: {exc}") from None
    if way.shape[1] != 5:
        raise ConfigInvalid("script waypoints need 5 values: t x y z yaw")
    if np.any(np.diff(way[:, 0]) <= 0):
        raise ConfigInvalid("script waypoint times must increase")
    return way


def sample_trajectory(config: WorldConfig, t) -> TrajectorySample:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    r = config.trajectory_scale
    zeros = np.zeros_like(t)
    kind = config.trajectory_kind
    if kind == "circle":
        w = 2 * np.pi / config.loop_period
        th = w * t
        c, s = np.cos(th), np.sin(th)
        p = np.stack([r * c, r * s, zeros], axis=1)
        v = np.stack([-r * w * s, r * w * c, zeros], axis=1)
        a = np.stack([-r * w * w * c, -r * w * w * s, zeros], axis=1)
        return TrajectorySample(p, v, a, th, np.full_like(t, w))
    if kind == "figure_eight":
        w = 2 * np.pi / config.loop_period
        th = w * t
        p = np.stack([r * np.sin(th), 0.5 * r * np.sin(2 * th), zeros], axis=1)
        v = np.stack([r * w * np.cos(th), r * w * np.cos(2 * th), zeros], axis=1)
        a = np.stack([-r * w * w * np.sin(th), -2 * r * w * w * np.sin(2 * th), zeros], axis=1)
        return TrajectorySample(p, v, a, th, np.full_like(t, w))
    if kind == "out_and_back":
        w = 2 * np.pi / config.duration
        p = np.stack([-r * np.cos(w * t), zeros, zeros], axis=1)
        v = np.stack([r * w * np.sin(w * t), zeros, zeros], axis=1)
        a = np.stack([r * w * w * np.cos(w * t), zeros, zeros], axis=1)
        return TrajectorySample(p, v, a, np.full_like(t, np.pi / 2), zeros.copy())
    way = _parse_script(config.script)
    p = np.zeros((len(t), 3))
    v = np.zeros((len(t), 3))
    a = np.zeros((len(t), 3))
    yaw = np.zeros(len(t))
    yaw_rate = np.zeros(len(t))
    seg = np.clip(np.searchsorted(way[:, 0], t, side="right") - 1, 0, len(way) - 2)
    ta, tb = way[seg, 0], way[seg + 1, 0]
    T = tb - ta
    tau = np.clip((t - ta) / T, 0.0, 1.0)
    inside = (t > ta) & (t < tb)
    s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    ds = np.where(inside, (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / T, 0.0)
    dds = np.where(inside, (60 * tau - 180 * tau**2 + 120 * tau**3) / T**2, 0.0)
    delta = way[seg + 1, 1:] - way[seg, 1:]
    p = way[seg, 1:4] + delta[:, :3] * s[:, None]
    v = delta[:, :3] * ds[:, None]
    a = delta[:, :3] * dds[:, None]
    yaw = way[seg, 4] + delta[:, 3] * s
    yaw_rate = delta[:, 3] * ds
    return TrajectorySample(p, v, a, yaw, yaw_rate)


def _yaw_quats(yaw):
    yaw = np.asarray(yaw)
    return np.stack([np.cos(yaw / 2), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(yaw / 2)], axis=1)


def true_poses(config: WorldConfig, t):
    s = sample_trajectory(config, t)
    return [Pose(q, p) for q, p in zip(_yaw_quats(s.yaw), s.p)]


def ideal_imu(config: WorldConfig, t):
    """Noise- and bias-free gyro and accelerometer readings at times ``t``."""
    s = sample_trajectory(config, t)
    c, sn = np.cos(s.yaw), np.sin(s.yaw)
    f_w = s.a - GRAVITY
    # R_z(yaw)^T f_w
    accel = np.stack([c * f_w[:, 0] + sn * f_w[:, 1], -sn * f_w[:, 0] + c * f_w[:, 1], f_w[:, 2]], axis=1)
    gyro = np.stack([np.zeros_like(s.yaw_rate), np.zeros_like(s.yaw_rate), s.yaw_rate], axis=1)
    return gyro, accel


# ---------------------------------------------------------------------------
# generation

def make_landmarks(config: WorldConfig, rng):
    n = config.landmark_count
    lo, hi = config.landmark_shell
    az = rng.uniform(0.0, 2 * np.pi, n)
    el = rng.uniform(-config.landmark_max_elevation, config.landmark_max_elevation, n)
    rng_ = rng.uniform(lo, hi, n)
    pos = np.stack([rng_ * np.cos(el) * np.cos(az), rng_ * np.cos(el) * np.sin(az), rng_ * np.sin(el)], axis=1)
    desc = rng.integers(0, 256, size=(n, 32), dtype=np.uint8)
    return np.arange(n, dtype=np.int64), pos, desc


def flip_bits(desc, prob, rng):
    """XOR every bit of ``desc`` (n, 32) with an independent Bernoulli(prob) draw."""
    if prob <= 0:
        return desc.copy()
    mask = np.packbits(rng.random((len(desc), 256)) < prob, axis=1)
    return desc ^ mask


def observe(pose: Pose, positions, camera: PinholeCamera, extrinsics, max_range=np.inf):
    """Noiseless projections; returns (indices, camera index, pixels, depths)."""
    R_wb, t_wb = pose.R, pose.t
    idx, cams, pix, depth = [], [], [], []
    p_b = (positions - t_wb) @ R_wb
    for c, (R_bc, t_bc) in enumerate(extrinsics):
        p_c = (p_b - t_bc) @ R_bc
        z = p_c[:, 2]
        ok = (z > 0.1) & (np.linalg.norm(p_c, axis=1) < max_range)
        uv = np.full((len(p_c), 2), -1.0)
        uv[ok] = camera.project(p_c[ok])
        ok &= camera.in_image(uv)
        k = np.flatnonzero(ok)
        idx.append(k)
        cams.append(np.full(len(k), c))
        pix.append(uv[k])
        depth.append(z[k])
    return (np.concatenate(idx), np.concatenate(cams), np.concatenate(pix), np.concatenate(depth))


def generate(config: WorldConfig, noise: NoiseModel | None = None,
             camera: PinholeCamera = DEFAULT_CAMERA) -> SimRun:
    """Render the frame stream and IMU samples for ``config``."""
    config.validate()
    noise = noise if noise is not None else NoiseModel()
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_lm, rng_imu, rng_px, rng_desc = (np.random.default_rng(s) for s in seeds)

    ids, positions, descs = make_landmarks(config, rng_lm)
    extr = rig_extrinsics(config.stereo_baseline)

    ratio = config.imu_per_frame
    n_frames = config.n_frames
    n_imu = (n_frames - 1) * ratio + 1
    imu_t = np.arange(n_imu) / config.imu_rate
    gyro, accel = ideal_imu(config, imu_t)
    dt = 1.0 / config.imu_rate
    bg = np.cumsum(rng_imu.normal(scale=noise.gyro_bias_walk * math.sqrt(dt), size=(n_imu, 3)), axis=0)
    ba = np.cumsum(rng_imu.normal(scale=noise.accel_bias_walk * math.sqrt(dt), size=(n_imu, 3)), axis=0)
    bg -= bg[0]
    ba -= ba[0]
    gyro_meas = gyro + bg + rng_imu.normal(scale=noise.gyro_sigma / math.sqrt(dt), size=(n_imu, 3))
    accel_meas = accel + ba + rng_imu.normal(scale=noise.accel_sigma / math.sqrt(dt), size=(n_imu, 3))

    times = config.frame_times()
    traj = sample_trajectory(config, times)
    quats = _yaw_quats(traj.yaw)
    frames = []
    for k, t in enumerate(times):
        pose = Pose(quats[k], traj.p[k])
        li, cams, pix, _ = observe(pose, positions, camera, extr, config.max_range)
        if noise.pixel_sigma > 0:
            pix = pix + rng_px.normal(scale=noise.pixel_sigma, size=pix.shape)
        keep = camera.in_image(pix) if len(pix) else np.zeros(0, bool)
        li, cams, pix = li[keep], cams[keep], pix[keep]
        d = flip_bits(descs[li], noise.descriptor_flip_prob, rng_desc)
        lo = max(0, (k - 1) * ratio)
        hi = k * ratio + 1
        R = quat_to_matrix(quats[k])
        frames.append(FrameBundle(
            index=k, timestamp=float(t), true_pose=pose,
            landmark_ids=ids[li], cameras=cams, pixels=pix, descriptors=d,
            imu_t=imu_t[lo:hi], gyro=gyro_meas[lo:hi], accel=accel_meas[lo:hi],
            true_velocity=R.T @ traj.v[k], true_gyro_bias=bg[k * ratio].copy(),
            true_accel_bias=ba[k * ratio].copy()))
    return SimRun(config, noise, ids, positions, descs, frames, imu_t, gyro_meas, accel_meas)


# ---------------------------------------------------------------------------
# revisits

def revisit_schedule(config: WorldConfig, max_dist=0.5, max_angle_deg=20.0, min_gap=10.0):
    """Checkpoint frame pairs (i, j), i < j, where the true trajectory revisits itself.

    For every frame i and every contiguous run of later frames j that lie within
    ``max_dist`` and ``max_angle_deg`` of frame i (and at least ``min_gap``
    seconds later) the closest frame of the run is reported.
    """
    times = config.frame_times()
    s = sample_trajectory(config, times)
    d = np.linalg.norm(s.p[:, None, :] - s.p[None, :, :], axis=2)
    dyaw = np.abs((s.yaw[:, None] - s.yaw[None, :] + np.pi) % (2 * np.pi) - np.pi)
    gap = times[None, :] - times[:, None]
    ok = (d < max_dist) & (dyaw < np.deg2rad(max_angle_deg)) & (gap >= min_gap - 1e-9)
    pairs = []
    for i in range(len(times)):
        js = np.flatnonzero(ok[i])
        if len(js) == 0:
            continue
        runs = np.split(js, np.flatnonzero(np.diff(js) > 1) + 1)
        for run in runs:
            pairs.append((i, int(run[np.argmin(d[i, run])])))
    if not pairs:
        raise NoRevisits(f"{config.trajectory_kind} trajectory never revisits a place")
    return pairs


def checkpoint_times(config: WorldConfig, pairs=None, stride=1):
    pairs = revisit_schedule(config) if pairs is None else pairs
    times = config.frame_times()
    return [(float(times[i]), float(times[j])) for i, j in pairs[::stride]]


# ---------------------------------------------------------------------------
# keyframe-level simulation with odometry drift

@dataclass
class KeyframeStream:
    records: list
    truth: list  # (timestamp, Pose)


def _yaw_origin_transform(pose: Pose):
    """Yaw+translation transform that maps ``pose`` to zero position and zero yaw."""
    R = pose.R
    yaw = math.atan2(R[1, 0], R[0, 0])
    g = Pose(np.array([math.cos(-yaw / 2), 0.0, 0.0, math.sin(-yaw / 2)]), np.zeros(3))
    return Pose(g.q, -(g.R @ pose.t))


def simulate_keyframes(config: WorldConfig, noise: NoiseModel | None = None,
                       drift: OdometryDrift | None = None, interval=0.5, start_time=0.0,
                       end_time=None, anchor="truth", map_id=0, seed_offset=0,
                       camera: PinholeCamera = DEFAULT_CAMERA) -> KeyframeStream:
    """Keyframe records as a drifting odometry front-end would publish them.

    Keyframes sit on a fixed time grid ``start_time + k * interval``. Their
    poses chain the true relative motions perturbed by ``drift``; landmark
    points are the true body-frame positions plus isotropic noise. Track ids
    persist while a landmark stays visible in consecutive keyframes, so
    subsequent keyframes share ids and a revisit after a gap does not.
    ``anchor='origin'`` starts the odometry at zero position and yaw, the
    arbitrary world frame of a fresh session.
    """
    noise = noise if noise is not None else NoiseModel()
    drift = drift if drift is not None else OdometryDrift()
    end_time = config.duration if end_time is None else end_time
    # landmarks must match generate(): same first spawned stream
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    _, positions, descs = make_landmarks(config, np.random.default_rng(seeds[0]))
    rng = np.random.default_rng([config.seed, 7919, seed_offset])
    extr = rig_extrinsics(0.0)

    times = np.arange(start_time, end_time + 1e-9, interval)
    truth = true_poses(config, times)
    records = []
    prev_visible = {}
    next_track = 0
    odom = None
    for k, (t, pose) in enumerate(zip(times, truth)):
        li, _, pix, depth = observe(pose, positions, camera, extr, config.max_range)
        if noise.pixel_sigma > 0:
            pix = pix + rng.normal(scale=noise.pixel_sigma, size=pix.shape)
        keep = camera.in_image(pix) if len(pix) else np.zeros(0, bool)
        li, pix, depth = li[keep], pix[keep], depth[keep]
        visible = {}
        tracks = np.empty(len(li), dtype=np.int64)
        for n, lid in enumerate(li):
            tid = prev_visible.get(int(lid))
            if tid is None:
                tid = next_track
                next_track += 1
            visible[int(lid)] = tid
            tracks[n] = tid
        prev_visible = visible
        p_b = (positions[li] - pose.t) @ pose.R
        p_b = p_b + rng.normal(size=p_b.shape) * (drift.point_sigma * np.maximum(depth, 1.0) / 5.0)[:, None]
        desc = flip_bits(descs[li], noise.descriptor_flip_prob, rng)

        if odom is None:
            odom = pose if anchor == "truth" else _yaw_origin_transform(pose) @ pose
        else:
            rel = relative_pose(truth[k - 1], pose)
            dyaw = drift.yaw_rate * interval
            rot_noise = rng.normal(scale=drift.rot_sigma, size=3) + np.array([0.0, 0.0, dyaw])
            t_noisy = (1.0 + drift.scale_error) * rel.t + rng.normal(scale=drift.trans_sigma, size=3)
            rel = Pose(Pose(quat_from_rotvec(rot_noise), np.zeros(3)).q, np.zeros(3)) @ Pose(rel.q, t_noisy)
            odom = odom @ rel
        records.append(KeyframeRecord(
            id=k, timestamp=float(t), pose=odom, landmark_ids=tracks, pixels=pix,
            descriptors=desc, points=p_b, map_id=map_id,
            meta={"true_pose": pose}))
    return KeyframeStream(records, list(zip((float(t) for t in times), truth)))


# ---------------------------------------------------------------------------
# config file

def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v)


def write_config(config: WorldConfig, path):
    with open(path, "w") as fh:
        fh.write("# vislam world config: key = value\n")
        for k, v in asdict(config).items():
            if isinstance(v, list):
                v = tuple(v)
            fh.write(f"{k} = {_format_value(v)}\n")


def read_config(path) -> WorldConfig:
    """Parse a ``key = value`` world file; unknown keys raise ConfigInvalid."""
    types = {f.name: f.type for f in fields(WorldConfig)}
    kwargs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigInvalid(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key == "landmark_shell":
                    kwargs[key] = tuple(float(x) for x in value.split(","))
                elif types[key] in ("int", int):
                    kwargs[key] = int(value)
                elif types[key] in ("float", float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError:
                raise ConfigInvalid(f"{path}:{lineno}: bad value for {key}") from None
    return WorldConfig(**kwargs)


def with_overrides(config: WorldConfig, **kw) -> WorldConfig:
    return replace(config, **kw)


def pose_distance(a: Pose, b: Pose):
    """(translation distance, rotation angle) between two poses."""
    rel = relative_pose(a, b)
    return float(np.linalg.norm(a.t - b.t)), rotation_angle(rel)

"""Two-stage pipeline (odometry -> SLAM) and simulated data directories.

A data directory holds ``config.txt`` (world), ``frames.npz`` (observations
and IMU), ``groundtruth.tum`` (per-frame truth), ``checkpoints.txt``
(revisit pairs, if any) and ``vocabulary.bin`` trained on the world's
landmark descriptors.
"""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from vislam.errors import FormatError, NoRevisits
from vislam.evaluation import Trajectory, write_checkpoints, write_tum
from vislam.geometry import Pose
from vislam.posegraph import PoseGraph
from vislam.retrieval import Vocabulary, build_vocabulary
from vislam.sim import (FrameBundle, NoiseModel, SimRun, WorldConfig, checkpoint_times, flip_bits, generate,
                        read_config, write_config)
from vislam.slam import SlamBackend, SlamConfig
from vislam.vio import EstimatorConfig, SlidingWindowVIO


def train_vocabulary(descriptors, k=16, L=2, copies=2, flip_prob=0.02, seed=0) -> Vocabulary:
    """Vocabulary over ``descriptors`` plus ``copies`` bit-flipped replicas."""
    d = np.asarray(descriptors, np.uint8).reshape(-1, 32)
    rng = np.random.default_rng(seed)
    sample = np.concatenate([d] + [flip_bits(d, flip_prob, rng) for _ in range(copies)])
    return build_vocabulary(sample, k, L, seed)


# ---------------------------------------------------------------------------
# data directories

def save_run(run: SimRun, out_dir, vocabulary: Vocabulary | None = None):
    os.makedirs(out_dir, exist_ok=True)
    write_config(run.config, os.path.join(out_dir, "config.txt"))
    fr = run.frames
    counts = np.array([len(f.landmark_ids) for f in fr])
    imu_counts = np.array([len(f.imu_t) for f in fr])
    np.savez_compressed(
        os.path.join(out_dir, "frames.npz"),
        index=np.array([f.index for f in fr]), timestamp=np.array([f.timestamp for f in fr]),
        true_q=np.array([f.true_pose.q for f in fr]), true_t=np.array([f.true_pose.t for f in fr]),
        true_velocity=np.array([f.true_velocity for f in fr]),
        true_gyro_bias=np.array([f.true_gyro_bias for f in fr]),
        true_accel_bias=np.array([f.true_accel_bias for f in fr]),
        obs_count=counts, landmark_ids=np.concatenate([f.landmark_ids for f in fr]),
        cameras=np.concatenate([f.cameras for f in fr]), pixels=np.concatenate([f.pixels for f in fr]),
        descriptors=np.concatenate([f.descriptors for f in fr]),
        imu_count=imu_counts, imu_t=np.concatenate([f.imu_t for f in fr]),
        gyro=np.concatenate([f.gyro for f in fr]), accel=np.concatenate([f.accel for f in fr]),
        landmark_positions=run.landmark_positions, landmark_descriptors=run.landmark_descriptors,
        world_landmark_ids=run.landmark_ids)
    write_tum(os.path.join(out_dir, "groundtruth.tum"), Trajectory.from_pairs(run.ground_truth))
    try:
        write_checkpoints(os.path.join(out_dir, "checkpoints.txt"), checkpoint_times(run.config))
    except NoRevisits:
        pass
    voc = vocabulary if vocabulary is not None else train_vocabulary(run.landmark_descriptors)
    voc.save(os.path.join(out_dir, "vocabulary.bin"))


def load_frames(data_dir):
    """(WorldConfig, [FrameBundle]) from a data directory."""
    cfg = read_config(os.path.join(data_dir, "config.txt"))
    try:
        with np.load(os.path.join(data_dir, "frames.npz")) as npz:
            z = dict(npz)
        oc = np.concatenate([[0], np.cumsum(z["obs_count"])])
        ic = np.concatenate([[0], np.cumsum(z["imu_count"])])
        frames = []
        for k in range(len(z["index"])):
            a, b = oc[k], oc[k + 1]
            c, d = ic[k], ic[k + 1]
            frames.append(FrameBundle(
                index=int(z["index"][k]), timestamp=float(z["timestamp"][k]),
                true_pose=Pose(z["true_q"][k], z["true_t"][k]),
                landmark_ids=z["landmark_ids"][a:b], cameras=z["cameras"][a:b], pixels=z["pixels"][a:b],
                descriptors=z["descriptors"][a:b], imu_t=z["imu_t"][c:d], gyro=z["gyro"][c:d],
                accel=z["accel"][c:d], true_velocity=z["true_velocity"][k],
                true_gyro_bias=z["true_gyro_bias"][k], true_accel_bias=z["true_accel_bias"][k]))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{data_dir}: unreadable frame stream ({exc})") from None
    return cfg, frames


def simulate_to_dir(config: WorldConfig, out_dir, noise: NoiseModel | None = None):
    run = generate(config, noise)
    save_run(run, out_dir)
    return run


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineResult:
    trajectory: Trajectory                   # online per-frame estimate (corrected in slam mode)
    keyframes: list                          # published KeyframeRecords
    slam: SlamBackend | None = None
    vio_timings: list = field(default_factory=list)
    slam_timings: list = field(default_factory=list)

    @property
    def keyframe_trajectory(self) -> Trajectory:
        """Optimized keyframe poses (slam) or odometry keyframe poses (odom)."""
        if self.slam is not None:
            return Trajectory.from_pairs(self.slam.trajectory())
        return Trajectory.from_pairs([(r.timestamp, r.pose) for r in self.keyframes])

    @property
    def events(self):
        return self.slam.events if self.slam is not None else []


def run_pipeline(frames, mode="slam", vocabulary: Vocabulary | None = None,
                 vio_config: EstimatorConfig | None = None, slam_config: SlamConfig | None = None,
                 prev_map: PoseGraph | None = None, parallel=False) -> PipelineResult:
    """Run odometry over ``frames``; in slam mode feed retired keyframes to the SLAM stage.

    Synchronous mode processes every retired keyframe before the next frame
    and applies the correction immediately (deterministic). Parallel mode
    runs SLAM in a worker thread and applies whichever correction is
    available when a frame starts.
    """
    if mode not in ("odom", "slam"):
        raise ValueError(f"unknown mode {mode!r}")
    slam = None
    if mode == "slam":
        if vocabulary is None:
            raise ValueError("slam mode needs a vocabulary")
        slam = SlamBackend(vocabulary, slam_config, prev_map=prev_map)
    pending = []
    vio = SlidingWindowVIO(vio_config, on_keyframe=pending.append)

    if slam is None or not parallel:
        for b in frames:
            vio.step(b)
            if slam is not None and pending:
                for r in pending:
                    g = slam.on_keyframe(r)
                pending.clear()
                vio.set_correction(g)
        vio.flush()
        if slam is not None:
            for r in pending:
                slam.on_keyframe(r)
        pending.clear()
    else:
        q = queue.Queue()
        latest = {"g": None}
        lock = threading.Lock()
        failure = []

        def worker():
            try:
                while True:
                    r = q.get()
                    if r is None:
                        return
                    g = slam.on_keyframe(r)
                    with lock:
                        latest["g"] = g
            except Exception as exc:        # surfaced in the main thread
                failure.append(exc)

        th = threading.Thread(target=worker, daemon=True)
        th.start()
        try:
            for b in frames:
                with lock:
                    g, latest["g"] = latest["g"], None
                if g is not None:
                    vio.set_correction(g)
                vio.step(b)
                for r in pending:
                    q.put(r)
                pending.clear()
                if failure:
                    break
            vio.flush()
            for r in pending:
                q.put(r)
            pending.clear()
        finally:
            q.put(None)
            th.join()
        if failure:
            raise failure[0]
    traj = Trajectory.from_pairs(vio.trajectory)
    return PipelineResult(traj, list(vio.published), slam, list(vio.timings),
                          list(slam.timings) if slam is not None else [])

"""Drifting odometry vs. pose-graph SLAM on a circular world.

Simulates 200 keyframes of a drifting front-end, feeds them through the
SLAM stage and compares both trajectories against the truth. Writes
``loop_closure.svg`` next to this script.
"""

import os

import numpy as np

from vislam.evaluation import Trajectory, ate, checkpoint_error
from vislam.pipeline import train_vocabulary
from vislam.plotting import plot_trajectories
from vislam.sim import WorldConfig, checkpoint_times, simulate_keyframes
from vislam.slam import SlamBackend

cfg = WorldConfig(duration=99.5)
stream = simulate_keyframes(cfg)
voc = train_vocabulary(np.concatenate([r.descriptors for r in stream.records]))

slam = SlamBackend(voc)
for rec in stream.records:
    slam.on_keyframe(rec)

times = np.array([r.timestamp for r in stream.records])
truth = Trajectory(times, [p for _, p in stream.truth])
odom = Trajectory(times, [r.pose for r in stream.records])
est = Trajectory.from_pairs(slam.trajectory())

# revisit pairs that fall on the keyframe grid
pairs = [(a, b) for a, b in checkpoint_times(cfg)
         if est.nearest(a, 1e-6) is not None and est.nearest(b, 1e-6) is not None]

print(f"{len(stream.records)} keyframes, {slam.loop_count} loop closures")
print(f"{'':10s} {'ATE [m]':>9s} {'checkpoint [m]':>15s}")
for name, tr in (("odometry", odom), ("slam", est)):
    print(f"{name:10s} {ate(tr, truth).rmse:9.4f} {checkpoint_error(tr, pairs).mean:15.4f}")

loop_ms = [ms for _, ms, ev in slam.timings if ev == "loop"]
plain_ms = [ms for _, ms, ev in slam.timings if ev == "none"]
print(f"slam stage: median {np.median(plain_ms):.1f} ms per keyframe, "
      f"{np.median(loop_ms):.1f} ms with a loop closure")

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "loop_closure.svg")
segs = [(e["timestamp"], e["match_timestamp"]) for e in slam.events if e["event"] == "loop"]
plot_trajectories([est, odom, truth], out, ["slam", "odometry", "truth"], segs[::10], "circle, 200 keyframes")
print("wrote", out)

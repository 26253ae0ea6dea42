"""Sensitivity of loop closing to the retrieval score threshold.

The acceptance threshold on the bag-of-words score has no canonical value;
this sweeps it and reports how many candidates survive verification and
what that does to accuracy.
"""

import numpy as np

from vislam.evaluation import Trajectory, ate
from vislam.pipeline import train_vocabulary
from vislam.sim import WorldConfig, simulate_keyframes
from vislam.slam import SlamBackend, SlamConfig

stream = simulate_keyframes(WorldConfig(duration=99.5))
voc = train_vocabulary(np.concatenate([r.descriptors for r in stream.records]))
truth = Trajectory([t for t, _ in stream.truth], [p for _, p in stream.truth])

print(f"{'min_score':>9s} {'loops':>6s} {'ATE [m]':>8s} {'slam ms/kf':>11s}")
for s in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5):
    slam = SlamBackend(voc, SlamConfig(min_score=s))
    for rec in stream.records:
        slam.on_keyframe(rec)
    ms = np.mean([t for _, t, _ in slam.timings])
    print(f"{s:9.2f} {slam.loop_count:6d} {ate(Trajectory.from_pairs(slam.trajectory()), truth).rmse:8.4f} "
          f"{ms:11.1f}")

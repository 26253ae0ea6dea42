"""Self-relocalization at 10 s offsets.

A 60 s session builds the previous map. Fresh sessions then start 10, 20,
30, 40 and 50 s into the same trajectory, each in its own arbitrary world
frame, and run until their hypotheses are accepted and the maps merge.
"""

import numpy as np

from vislam.evaluation import Trajectory, ate
from vislam.pipeline import train_vocabulary
from vislam.sim import WorldConfig, simulate_keyframes
from vislam.slam import SlamBackend

cfg = WorldConfig(duration=60.0)
first = simulate_keyframes(cfg, end_time=59.5)
voc = train_vocabulary(np.concatenate([r.descriptors for r in first.records]))
prev = SlamBackend(voc)
for rec in first.records:
    prev.on_keyframe(rec)

truth = Trajectory([t for t, _ in first.truth], [p for _, p in first.truth])
prev_ate = ate(Trajectory.from_pairs(prev.trajectory()), truth)
print(f"previous map: {len(prev.graph.nodes)} keyframes, ATE {prev_ate.rmse:.4f} m")
print(f"{'offset':>7s} {'first match':>12s} {'merge':>6s} {'latency':>8s} {'ATE after merge':>16s}")

for k, offset in enumerate((10.0, 20.0, 30.0, 40.0, 50.0)):
    stream = simulate_keyframes(cfg, start_time=offset, end_time=offset + 30.0, anchor="origin",
                                map_id=1, seed_offset=k + 1)
    slam = SlamBackend(voc, prev_map=prev.graph)
    for rec in stream.records:
        slam.on_keyframe(rec)
    merge = next(e for e in slam.events if e["event"] == "merge")
    gt = dict(stream.truth)
    seg = [n for n in slam.graph.map_nodes(1) if n.id >= merge["keyframe"]][:20]
    err = [np.linalg.norm(prev_ate.alignment.act(n.pose.t) - gt[n.timestamp].t) for n in seg]
    print(f"{offset:6.0f}s {merge['first_match_keyframe']:12d} {merge['keyframe']:6d} "
          f"{merge['latency_keyframes']:8d} {np.sqrt(np.mean(np.square(err))):15.4f}m")

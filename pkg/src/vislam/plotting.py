"""Top-down path and height profile plots written as SVG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from vislam.evaluation import Trajectory  # noqa: E402


def plot_trajectories(trajs, out_path, labels=None, loop_segments=(), title=None):
    """Two panels: x-y path and z over time. ``loop_segments`` are (t_a, t_b) pairs
    drawn as connectors on the first trajectory."""
    labels = labels or [f"traj {i}" for i in range(len(trajs))]
    fig, (ax, az) = plt.subplots(1, 2, figsize=(11, 4.8), gridspec_kw={"width_ratios": [1.2, 1]})
    for tr, lab in zip(trajs, labels):
        P = tr.positions
        ax.plot(P[:, 0], P[:, 1], lw=1.2, label=lab)
        az.plot(tr.times, P[:, 2], lw=1.0, label=lab)
    if trajs and loop_segments:
        ref: Trajectory = trajs[0]
        first = True
        for ta, tb in loop_segments:
            i, j = ref.nearest(ta, 0.05), ref.nearest(tb, 0.05)
            if i is None or j is None:
                continue
            seg = np.stack([ref.poses[i].t, ref.poses[j].t])
            ax.plot(seg[:, 0], seg[:, 1], color="tab:red", lw=0.6, alpha=0.6,
                    label="loop closure" if first else None)
            first = False
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    az.set_xlabel("t [s]")
    az.set_ylabel("z [m]")
    az.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path

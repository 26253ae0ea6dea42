"""Command line entry point: ``vislam {simulate,run,eval,plot}``.

Exit codes: 0 success, 1 configuration error, 2 data error,
3 tracking lost, 4 evaluation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from vislam.errors import ConfigInvalid, FormatError, VislamError
from vislam.evaluation import Trajectory, ate, checkpoint_error, read_checkpoints, read_euroc_csv, read_tum, write_tum
from vislam.pipeline import load_frames, run_pipeline, simulate_to_dir, train_vocabulary
from vislam.reloc import load_map, save_map
from vislam.retrieval import Vocabulary
from vislam.sim import NoiseModel, WorldConfig, read_config
from vislam.slam import SlamConfig
from vislam.vio import EstimatorConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="vislam", description="Visual-inertial odometry + keyframe SLAM on simulated worlds")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a world and its sensor streams")
    s.add_argument("--config", help="world config (key = value); defaults if omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--noise", choices=["default", "zero"], default="default")

    r = sub.add_parser("run", help="run odometry or full SLAM on a data directory")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=["odom", "slam"], default="slam")
    r.add_argument("--prev-map", help="g2o map saved by a previous slam run")
    r.add_argument("--out", required=True)
    r.add_argument("--start", type=float, default=None, help="skip frames before this time [s]")
    r.add_argument("--end", type=float, default=None, help="stop after this time [s]")
    r.add_argument("--init", choices=["truth", "origin"], default=None,
                   help="initial frame; default truth, or origin with --prev-map")
    r.add_argument("--parallel", action="store_true", help="run SLAM in its own thread")
    r.add_argument("--vocabulary", help="vocabulary file (default: DATA/vocabulary.bin)")
    r.add_argument("--min-score", type=float, default=SlamConfig.min_score)

    e = sub.add_parser("eval", help="ATE and checkpoint error")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True, help="TUM file or EuRoC ground-truth CSV")
    e.add_argument("--checkpoints")
    e.add_argument("--csv", action="store_true", help="machine-readable output")
    e.add_argument("--max-gap", type=float, default=0.02)

    pl = sub.add_parser("plot", help="top-down path and height profile (SVG)")
    pl.add_argument("--traj", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--events", help="events.json from a slam run; loop closures drawn as segments")
    pl.add_argument("--title")
    return p


def _read_traj(path):
    if path.endswith(".csv"):
        return read_euroc_csv(path)
    return read_tum(path)


def cmd_simulate(args):
    cfg = read_config(args.config) if args.config else WorldConfig()
    noise = NoiseModel.zero() if args.noise == "zero" else NoiseModel()
    run = simulate_to_dir(cfg, args.out, noise)
    print(f"simulated {len(run.frames)} frames, {len(run.landmark_ids)} landmarks -> {args.out}")
    return 0


def cmd_run(args):
    if args.start is not None and args.end is not None and args.end <= args.start:
        raise ConfigInvalid("--end must be after --start")
    if not 0.0 <= args.min_score <= 1.0:
        raise ConfigInvalid("--min-score must lie in [0, 1]")
    _, frames = load_frames(args.data)
    if args.start is not None:
        frames = [f for f in frames if f.timestamp >= args.start - 1e-9]
    if args.end is not None:
        frames = [f for f in frames if f.timestamp <= args.end + 1e-9]
    if len(frames) < 2:
        raise FormatError("fewer than two frames selected")
    init = args.init or ("origin" if args.prev_map else "truth")
    voc = None
    prev = None
    if args.mode == "slam":
        vpath = args.vocabulary or os.path.join(args.data, "vocabulary.bin")
        if os.path.exists(vpath):
            voc = Vocabulary.load(vpath)
        else:
            voc = train_vocabulary(np.concatenate([f.descriptors for f in frames]))
        if args.prev_map:
            prev = load_map(args.prev_map)
    elif args.prev_map:
        raise ConfigInvalid("--prev-map requires --mode slam")
    res = run_pipeline(frames, args.mode, voc, EstimatorConfig(init=init), SlamConfig(min_score=args.min_score),
                       prev, args.parallel)

    os.makedirs(args.out, exist_ok=True)
    write_tum(os.path.join(args.out, "trajectory.tum"), res.trajectory)
    write_tum(os.path.join(args.out, "keyframes.tum"), res.keyframe_trajectory)
    with open(os.path.join(args.out, "vio_timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "ms"])
        w.writerows((fid, f"{ms:.3f}") for fid, ms in res.vio_timings)
    if res.slam is not None:
        with open(os.path.join(args.out, "slam_timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["keyframe", "ms", "event"])
            w.writerows((kid, f"{ms:.3f}", ev) for kid, ms, ev in res.slam_timings)
    summary = {"mode": args.mode, "frames": len(frames), "keyframes": len(res.keyframes),
               "loop_closures": 0, "merged": False}
    if res.slam is not None:
        save_map(res.slam.graph, os.path.join(args.out, "map.g2o"))
        summary["loop_closures"] = res.slam.loop_count
        summary["merged"] = res.slam.merged
        merge = [e for e in res.events if e["event"] == "merge"]
        if merge:
            summary["reloc_latency_keyframes"] = merge[0]["latency_keyframes"]
    with open(os.path.join(args.out, "events.json"), "w") as fh:
        json.dump(res.events, fh, indent=1)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


def cmd_eval(args):
    est, gt = _read_traj(args.est), _read_traj(args.gt)
    a = ate(est, gt, args.max_gap)
    rows = [("ate_rmse_m", a.rmse), ("ate_pairs", len(a.pairs))]
    if args.checkpoints:
        c = checkpoint_error(est, read_checkpoints(args.checkpoints), tol=args.max_gap)
        rows += [("checkpoint_mean_m", c.mean), ("checkpoint_pairs", len(c.pairs))]
    if args.csv:
        print("metric,value")
        for k, v in rows:
            print(f"{k},{v:.6f}" if isinstance(v, float) else f"{k},{v}")
    else:
        for k, v in rows:
            print(f"{k:<20} {v:.3f}" if isinstance(v, float) else f"{k:<20} {v}")
    return 0


def cmd_plot(args):
    from vislam.plotting import plot_trajectories
    trajs = [_read_traj(p) for p in args.traj]
    segs = []
    if args.events:
        with open(args.events) as fh:
            segs = [(e["timestamp"], e["match_timestamp"]) for e in json.load(fh)
                    if e.get("event") == "loop" and "match_timestamp" in e]
    plot_trajectories(trajs, args.out, [os.path.basename(p) for p in args.traj], segs, args.title)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except VislamError as exc:
        print(f"vislam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"vislam: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

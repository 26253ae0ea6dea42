import csv
import json

import pytest

from vislam.cli import main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.txt").write_text("loop_period = 10\nduration = 18\n")
    assert main(["simulate", "--config", str(root / "world.txt"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def slam_run(data):
    out = data / "slam"
    assert main(["run", "--data", str(data / "data"), "--mode", "slam", "--end", "12", "--out", str(out)]) == 0
    return out


def test_simulate_writes_directory(data):
    d = data / "data"
    for name in ("config.txt", "frames.npz", "groundtruth.tum", "checkpoints.txt", "vocabulary.bin"):
        assert (d / name).exists()


def test_slam_run_logs_loop_closures(slam_run):
    summary = json.loads((slam_run / "summary.json").read_text())
    assert summary["loop_closures"] >= 1
    events = json.loads((slam_run / "events.json").read_text())
    assert any(e["event"] == "loop" for e in events)
    for name in ("trajectory.tum", "keyframes.tum", "map.g2o", "map.g2o.kfb"):
        assert (slam_run / name).exists()
    with open(slam_run / "vio_timing.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame", "ms"] and len(rows) - 1 == summary["frames"]
    with open(slam_run / "slam_timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["keyframes"]
    assert {r["event"] for r in rows} <= {"none", "loop", "merge"}


def test_eval_against_itself_is_zero(slam_run, capsys):
    tum = str(slam_run / "trajectory.tum")
    assert main(["eval", "--est", tum, "--gt", tum, "--csv"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric,value" and out[1] == "ate_rmse_m,0.000000"
    assert main(["eval", "--est", tum, "--gt", tum]) == 0
    assert "0.000" in capsys.readouterr().out


def test_eval_with_checkpoints(slam_run, data, capsys):
    cp = data / "cp.txt"
    cp.write_text("0.0 10.0\n1.0 11.0\n")
    args = ["eval", "--est", str(slam_run / "trajectory.tum"), "--gt", str(data / "data" / "groundtruth.tum"),
            "--checkpoints", str(cp), "--csv"]
    assert main(args) == 0
    assert "checkpoint_mean_m" in capsys.readouterr().out


def test_prev_map_run_logs_relocalization(slam_run, data):
    out = data / "reloc"
    args = ["run", "--data", str(data / "data"), "--mode", "slam", "--prev-map", str(slam_run / "map.g2o"),
            "--start", "10", "--end", "15", "--out", str(out)]
    assert main(args) == 0
    merges = [e for e in json.loads((out / "events.json").read_text()) if e["event"] == "merge"]
    assert len(merges) == 1 and "latency_keyframes" in merges[0]


def test_parallel_matches_sync_without_loops(data):
    outs = []
    for extra in ([], ["--parallel"]):
        out = data / ("par" if extra else "seq")
        assert main(["run", "--data", str(data / "data"), "--end", "6", "--out", str(out)] + extra) == 0
        assert json.loads((out / "summary.json").read_text())["loop_closures"] == 0
        outs.append(out)
    for name in ("trajectory.tum", "keyframes.tum"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_plot_writes_svg(slam_run, data):
    out = data / "p.svg"
    args = ["plot", "--traj", str(slam_run / "trajectory.tum"), str(data / "data" / "groundtruth.tum"),
            "--events", str(slam_run / "events.json"), "--out", str(out)]
    assert main(args) == 0
    assert out.read_text().lstrip().startswith("<?xml")


def test_exit_codes(slam_run, data, tmp_path):
    tum = str(slam_run / "trajectory.tum")
    bad_cp = tmp_path / "cp.txt"
    bad_cp.write_text("0.0 99.0\n")
    assert main(["eval", "--est", tum, "--gt", tum, "--checkpoints", str(bad_cp)]) == 4
    assert main(["eval", "--est", str(tmp_path / "missing.tum"), "--gt", tum]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run", "--data", str(data / "data"), "--mode", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 1
    assert main(["run", "--data", str(data / "data"), "--min-score", "2", "--out", str(tmp_path)]) == 1
    (tmp_path / "w.txt").write_text("no_such_key = 3\n")
    assert main(["simulate", "--config", str(tmp_path / "w.txt"), "--out", str(tmp_path / "x")]) == 1

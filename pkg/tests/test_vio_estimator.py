import numpy as np
import pytest

from vislam.camera import DEFAULT_CAMERA
from vislam.errors import TrackingLost
from vislam.geometry import Pose, translate
from vislam.sim import FrameBundle, NoiseModel, WorldConfig, generate
from vislam.vio import EstimatorConfig, SlidingWindowVIO, coverage_keyframe, hull_area, triangulate


@pytest.fixture(scope="module")
def noisy_run():
    run = generate(WorldConfig(duration=4))
    vio = SlidingWindowVIO()
    states, recent, kfs, eigs = [], [], [], []
    for b in run.frames:
        states.append(vio.step(b))
        recent.append(len(vio.window.recent))
        kfs.append(len(vio.window.keyframes))
        if vio.window.prior is not None:
            eigs.append(np.linalg.eigvalsh(vio.window.prior.information).min())
    return run, vio, states, recent, kfs, eigs


def test_zero_noise_tracks_ground_truth():
    run = generate(WorldConfig(duration=5), NoiseModel.zero())
    vio = SlidingWindowVIO()
    for b in run.frames:
        s = vio.step(b)
        assert np.linalg.norm(s.pose.t - b.true_pose.t) < 1e-3


def test_stationary_sequence_has_zero_velocity():
    cfg = WorldConfig(trajectory_kind="script", script="0 0 0 0 0; 100 0 0 0 0", duration=3)
    run = generate(cfg, NoiseModel.zero())
    vio = SlidingWindowVIO()
    for b in run.frames:
        s = vio.step(b)
    assert np.linalg.norm(s.velocity) < 1e-6


def test_window_bounds_and_monotone_cost(noisy_run):
    _, vio, _, recent, kfs, _ = noisy_run
    assert max(recent) <= 3 and max(kfs) <= 7
    for hist in vio.cost_history:
        assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_prior_stays_symmetric_psd(noisy_run):
    _, vio, _, _, _, eigs = noisy_run
    assert len(eigs) >= 50
    assert min(eigs) >= -1e-9
    info = vio.window.prior.information
    assert np.allclose(info, info.T)


def test_noisy_run_publishes_sequential_keyframes(noisy_run):
    run, vio, states, _, _, _ = noisy_run
    vio.flush()
    ids = [r.id for r in vio.published]
    assert ids == list(range(len(ids))) and len(ids) >= 3
    for r in vio.published:
        assert r.meta["frame"] in range(len(run.frames))
        assert r.has_point.sum() >= 6
    drift = np.linalg.norm(states[-1].pose.t - run.frames[-1].true_pose.t)
    assert 0 < drift < 0.05


def test_correction_applies_to_outputs_only():
    run = generate(WorldConfig(duration=1), NoiseModel.zero())
    vio = SlidingWindowVIO()
    for b in run.frames[:10]:
        vio.step(b)
    g = translate(1.0, -2.0, 0.5)
    vio.set_correction(g)
    s = vio.step(run.frames[10])
    raw = vio.state(corrected=False)
    assert np.allclose(s.pose.t, (g @ raw.pose).t)
    assert np.linalg.norm(raw.pose.t - run.frames[10].true_pose.t) < 1e-3


def test_origin_initialization():
    run = generate(WorldConfig(duration=1), NoiseModel.zero())
    vio = SlidingWindowVIO(EstimatorConfig(init="origin"))
    s = vio.step(run.frames[0])
    assert np.allclose(s.pose.t, 0.0) and np.allclose(s.pose.R, np.eye(3), atol=1e-12)


def test_tracking_lost_on_starved_frame():
    run = generate(WorldConfig(duration=1), NoiseModel.zero())
    vio = SlidingWindowVIO()
    for b in run.frames[:5]:
        vio.step(b)
    b = run.frames[5]
    starved = FrameBundle(b.index, b.timestamp, b.true_pose, b.landmark_ids[:3], b.cameras[:3], b.pixels[:3],
                          b.descriptors[:3], b.imu_t, b.gyro, b.accel, b.true_velocity)
    with pytest.raises(TrackingLost):
        vio.step(starved)


def shoelace(poly):
    x, y = np.asarray(poly).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def test_hull_area_against_shoelace(rng):
    for _ in range(20):
        ang = np.sort(rng.uniform(0, 2 * np.pi, 12))
        poly = np.stack([320 + 200 * np.cos(ang), 240 + 150 * np.sin(ang)], axis=1)
        inner = rng.dirichlet(np.ones(12), 30) @ poly
        assert np.isclose(hull_area(np.vstack([poly, inner])), shoelace(poly))
    assert hull_area([[0, 0], [1, 1], [2, 2]]) == 0.0


def test_keyframe_rule_examples():
    full = [[0, 0], [639, 0], [639, 479], [0, 479], [300, 200]]
    assert not coverage_keyframe(full)
    corner = [[1, 1], [60, 5], [10, 50]]
    assert hull_area(corner) < 0.01 * DEFAULT_CAMERA.image_area * 1.5
    assert coverage_keyframe(corner)
    half = [[0, 0], [640, 0], [640, 240], [0, 240]]
    assert hull_area(half) == 0.5 * DEFAULT_CAMERA.image_area
    assert not coverage_keyframe(half)
    assert coverage_keyframe(np.array(half) * [1, 0.999])


def test_triangulation_recovers_point(rng):
    X = np.array([1.0, -2.0, 6.0])
    centers = rng.normal(size=(4, 3))
    rots = np.stack([Pose(rng.normal(size=4), np.zeros(3)).R for _ in range(4)])
    bearings = np.einsum("nji,nj->ni", rots, X - centers)   # R^T (X - c), camera frame
    assert np.allclose(triangulate(centers, rots, bearings), X, atol=1e-9)

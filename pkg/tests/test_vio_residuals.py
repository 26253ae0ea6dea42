import numpy as np
import pytest

from conftest import rel_err
from vislam.camera import DEFAULT_CAMERA, body_T_cam
from vislam.errors import BehindCamera, EmptySegment
from vislam.geometry import Pose, boxplus, exp, random_pose
from vislam.sim import NoiseModel, WorldConfig, generate
from vislam.vio import (ImuNoise, VisualResidualTerm, inertial_residual, make_inertial_term, propagate,
                        visual_residual)
from vislam.vio.marginalization import prior_from_normal_equations


def central(f, n, eps=1e-6):
    return np.stack([(f(eps * e) - f(-eps * e)) / (2 * eps) for e in np.eye(n)], axis=-1)


def random_visual(rng):
    cam = body_T_cam(int(rng.integers(2)), 0.11)
    pose = random_pose(rng, 1.0, 1.0)
    pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 8)])
    lm = (pose @ cam).act(pc)
    term = VisualResidualTerm(0, 0, 0, DEFAULT_CAMERA.project(pc[None])[0] + rng.normal(size=2), np.eye(2))
    return term, pose, lm, cam


def test_visual_jacobians_match_finite_differences(rng):
    for _ in range(100):
        term, pose, lm, cam = random_visual(rng)
        r, Jp, Jl = visual_residual(term, pose, lm, DEFAULT_CAMERA, cam)
        Np = central(lambda d: visual_residual(term, boxplus(pose, d), lm, DEFAULT_CAMERA, cam)[0], 6)
        Nl = central(lambda d: visual_residual(term, pose, lm + d, DEFAULT_CAMERA, cam)[0], 3)
        assert rel_err(Jp, Np) < 1e-5
        assert rel_err(Jl, Nl) < 1e-5


def test_visual_residual_examples():
    cam = body_T_cam(0)
    lm = cam.act(np.array([0.0, 0.0, 5.0]))          # optical axis, 5 m ahead
    term = VisualResidualTerm(0, 0, 0, np.array([320.0, 240.0]), np.eye(2))
    r, _, _ = visual_residual(term, Pose.identity(), lm, DEFAULT_CAMERA, cam)
    assert np.allclose(r, 0.0)
    with pytest.raises(BehindCamera):
        visual_residual(term, Pose.identity(), cam.act(np.array([0.0, 0.0, -1.0])), DEFAULT_CAMERA, cam)


def test_visual_residual_linearization_at_1e6():
    rng = np.random.default_rng(3)
    term, pose, lm, cam = random_visual(rng)
    r0, Jp, _ = visual_residual(term, pose, lm, DEFAULT_CAMERA, cam)
    d = rng.normal(size=6) * 1e-6
    r1, _, _ = visual_residual(term, boxplus(pose, d), lm, DEFAULT_CAMERA, cam)
    assert np.allclose(r1 - r0, Jp @ d, atol=1e-8)


def _segment(rng, n=11, dt=0.005):
    t = np.arange(n) * dt
    gyro = rng.normal(scale=0.5, size=(n, 3))
    accel = rng.normal(scale=2.0, size=(n, 3)) + np.array([0, 0, 9.81])
    return t, gyro, accel


def _state_plus(state, d):
    pose, v, bg, ba = state
    return (boxplus(pose, d[:6]), v + d[6:9], bg + d[9:12], ba + d[12:15])


def test_inertial_jacobians_match_finite_differences(rng):
    for _ in range(100):
        t, gyro, accel = _segment(rng)
        s0 = (random_pose(rng, 1.0, 1.0), rng.normal(size=3), rng.normal(scale=0.01, size=3),
              rng.normal(scale=0.1, size=3))
        term = make_inertial_term(0, 1, s0, t, gyro, accel, ImuNoise())
        prop = propagate(s0[0].R, s0[0].t, *s0[1:], t, gyro, accel, jacobian=False)
        p1 = boxplus(Pose.from_rt(prop.R, prop.p), rng.normal(scale=0.05, size=6))
        s1 = (p1, p1.R.T @ prop.v + rng.normal(scale=0.05, size=3), s0[2] + 0.001, s0[3] - 0.01)
        r, Jk, Jk1 = inertial_residual(term, s0, s1)
        Nk = central(lambda d: inertial_residual(term, _state_plus(s0, d), s1, jacobians=False), 15)
        Nk1 = central(lambda d: inertial_residual(term, s0, _state_plus(s1, d), jacobians=False), 15)
        assert rel_err(Jk, Nk) < 1e-5
        assert rel_err(Jk1, Nk1) < 1e-5
        assert np.allclose(term.information, term.information.T)
        assert np.linalg.eigvalsh(term.information).min() > 0


def test_inertial_residual_vanishes_on_noiseless_truth():
    run = generate(WorldConfig(duration=2), NoiseModel.zero())
    for a, b in zip(run.frames[1:20], run.frames[2:21]):
        sa = (a.true_pose, a.true_velocity, np.zeros(3), np.zeros(3))
        sb = (b.true_pose, b.true_velocity, np.zeros(3), np.zeros(3))
        term = make_inertial_term(a.index, b.index, sa, b.imu_t, b.gyro, b.accel, ImuNoise())
        assert np.linalg.norm(inertial_residual(term, sa, sb, jacobians=False)) < 1e-6


def test_inertial_residual_statics_and_gyro_bias():
    t = np.arange(11) * 0.005
    gyro = np.zeros((11, 3))
    accel = np.tile([0.0, 0.0, 9.81], (11, 1))
    s = (Pose.identity(), np.zeros(3), np.zeros(3), np.zeros(3))
    term = make_inertial_term(0, 1, s, t, gyro, accel, ImuNoise())
    assert np.allclose(inertial_residual(term, s, s, jacobians=False), 0.0, atol=1e-12)
    delta = np.array([1e-3, -2e-3, 5e-4])
    sb = (Pose.identity(), np.zeros(3), delta, np.zeros(3))
    r = inertial_residual(term, sb, (Pose.identity(), np.zeros(3), delta, np.zeros(3)), jacobians=False)
    # removing a bias of delta from zero readings rotates by -delta*dt; the residual sees +delta*dt
    assert np.allclose(r[3:6], delta * 0.05, atol=1e-7)
    with pytest.raises(EmptySegment):
        propagate(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), t[:1], gyro[:1], accel[:1])


def test_prior_jacobians_match_finite_differences(rng):
    for _ in range(100):
        keys = [("T", 0), ("S", 0), ("L", 3)]
        dims = {("T", 0): 6, ("S", 0): 9, ("L", 3): 3}
        A = rng.normal(size=(18, 18))
        H = A @ A.T
        b = rng.normal(size=18)
        pts = {keys[0]: random_pose(rng), keys[1]: rng.normal(size=9), keys[2]: rng.normal(size=3)}
        prior = prior_from_normal_equations(keys, dims, H, b, pts)
        vals = {keys[0]: boxplus(pts[keys[0]], rng.normal(scale=0.3, size=6)),
                keys[1]: pts[keys[1]] + rng.normal(size=9), keys[2]: pts[keys[2]] + rng.normal(size=3)}
        r, jacs = prior.evaluate(vals)

        def shifted(key, d):
            v = dict(vals)
            v[key] = boxplus(v[key], d) if key[0] == "T" else v[key] + d
            return prior.evaluate(v, jacobians=False)[0]

        for key, J in zip(keys, jacs):
            N = central(lambda d: shifted(key, d), dims[key])
            assert rel_err(J, N) < 1e-5
        assert np.allclose(prior.information, H, atol=1e-8 * np.abs(H).max())

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_jacobian, rel_err
from vislam.errors import AngleNearPi
from vislam import geometry as G
from vislam.geometry import Pose, boxplus, compose, exp, inverse, log, relative_pose


def hat(xi):
    """4x4 twist matrix; the matrix exponential is the independent oracle."""
    M = np.zeros((4, 4))
    M[:3, :3] = G.skew(xi[3:])
    M[:3, 3] = xi[:3]
    return M


twists = arrays(np.float64, 6, elements=st.floats(-2.5, 2.5)).filter(lambda x: np.linalg.norm(x[3:]) < 3.0)


def pose_close(a, b, tol=1e-9):
    return np.allclose(a.matrix(), b.matrix(), atol=tol)


def test_exp_matches_matrix_exponential(rng):
    for _ in range(200):
        xi = rng.normal(size=6)
        assert np.allclose(exp(xi).matrix(), scipy.linalg.expm(hat(xi)), atol=1e-10)


def test_log_matches_matrix_logarithm(rng):
    for _ in range(100):
        p = G.random_pose(rng, 2.0, 3.0)
        L = np.real(scipy.linalg.logm(p.matrix()))
        xi = np.concatenate([L[:3, 3], [L[2, 1], L[0, 2], L[1, 0]]])
        assert np.allclose(log(p), xi, atol=1e-8)


@given(twists)
def test_exp_log_round_trip(xi):
    assert np.allclose(log(exp(xi)), xi, atol=1e-9)


def test_small_angles_are_stable():
    for s in [0.0, 1e-15, 1e-10, 1e-6, 1e-3]:
        xi = np.array([0.3, -0.2, 0.1, s, -s, 0.5 * s])
        assert np.allclose(log(exp(xi)), xi, atol=1e-12)
        assert np.allclose(exp(xi).matrix(), scipy.linalg.expm(hat(xi)), atol=1e-12)


def test_angle_near_pi_raises():
    p = Pose(G.quat_from_rotvec([0.0, 0.0, np.pi - 1e-8]), np.zeros(3))
    with pytest.raises(AngleNearPi):
        log(p)
    log(Pose(G.quat_from_rotvec([0.0, 0.0, np.pi - 1e-4]), np.zeros(3)))


def test_group_identities(rng):
    for _ in range(200):
        a, b, c = (G.random_pose(rng, 3.0) for _ in range(3))
        assert pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))
        assert pose_close(compose(a, inverse(a)), Pose.identity())
        assert pose_close(relative_pose(a, b), compose(inverse(a), b))
        assert pose_close(compose(a, relative_pose(a, b)), b)
        assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


def test_boxminus_inverts_boxplus(rng):
    for _ in range(100):
        p = G.random_pose(rng)
        d = rng.normal(scale=0.5, size=6)
        assert np.allclose(G.boxminus(boxplus(p, d), p), d, atol=1e-9)


def test_adjoint_moves_twists(rng):
    for _ in range(50):
        p = G.random_pose(rng)
        xi = rng.normal(size=6)
        lhs = compose(compose(p, exp(xi)), inverse(p))
        assert pose_close(lhs, exp(G.adjoint(p) @ xi), 1e-9)


def test_right_jacobian_and_inverse(rng):
    for _ in range(50):
        xi = rng.normal(scale=0.8, size=6)
        # d log(exp(xi) exp(d)) / dd at d = 0 equals Jr^-1(xi)
        J = numeric_jacobian(lambda p: log(p), exp(xi), boxplus, 6)
        assert rel_err(G.se3_right_jacobian_inv(xi), J) < 1e-6
        assert np.allclose(G.se3_right_jacobian(xi) @ G.se3_right_jacobian_inv(xi), np.eye(6), atol=1e-10)


def test_so3_jacobians(rng):
    for _ in range(50):
        phi = rng.normal(scale=0.8, size=3)
        Jr = G.so3_right_jacobian(phi)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            num = (G.so3_log(G.so3_exp(phi) @ G.so3_exp(e)) - G.so3_log(G.so3_exp(phi) @ G.so3_exp(-e))) / 2e-6
            assert np.allclose(np.linalg.solve(Jr, np.eye(3))[:, i], num, atol=1e-6)
        assert np.allclose(G.so3_right_jacobian_inv(phi) @ Jr, np.eye(3), atol=1e-10)


def test_batch_helpers_match_scalar(rng):
    xs = rng.normal(size=(20, 6))
    R, t = G.batch_se3_exp(xs)
    for x, Ri, ti in zip(xs, R, t):
        p = exp(x)
        assert np.allclose(Ri, p.R, atol=1e-12) and np.allclose(ti, p.t, atol=1e-12)
    small = np.linalg.norm(xs[:, 3:], axis=1) < 3.0
    assert np.allclose(G.batch_se3_log(R, t)[small], xs[small], atol=1e-9)
    assert np.allclose(G.batch_se3_right_jacobian_inv(xs), np.stack([G.se3_right_jacobian_inv(x) for x in xs]))
    poses = [G.random_pose(rng) for _ in range(5)]
    assert np.allclose(G.batch_adjoint(*G.poses_to_arrays(poses)), np.stack([G.adjoint(p) for p in poses]))


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_matrix_round_trip(q):
    q = G.quat_normalize(q)
    q2 = G.matrix_to_quat(G.quat_to_matrix(q))
    assert np.allclose(q2, q, atol=1e-9) or np.allclose(q2, -q, atol=1e-9)

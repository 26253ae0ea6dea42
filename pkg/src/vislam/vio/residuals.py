"""Visual and inertial residual terms of the odometry objective.

State perturbations follow the package-wide right-perturbation convention.
A frame's variables are split in two blocks:

* pose ``T`` (6): ``[rho, phi]`` with ``T <- T * exp(d)``;
* speed/bias ``S`` (9): ``[v_body, b_g, b_a]``, additive.

The 15-dim inertial residual is ordered ``[rho, phi, v, b_g, b_a]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vislam.camera import PinholeCamera
from vislam.errors import BehindCamera, EmptySegment
from vislam.geometry import (Pose, adjoint, batch_skew, batch_so3_exp, batch_so3_right_jacobian, inverse, log,
                             relative_pose, se3_right_jacobian_inv, skew)
from vislam.sim import GRAVITY

MIN_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# visual

def visual_residuals(R_wb, t_wb, R_bc, t_bc, landmarks, measured, camera: PinholeCamera, jacobians=True):
    """Batched reprojection residuals ``measured - project(T_cw * landmark)``.

    All inputs are stacked per observation (leading dimension n). Returns
    ``(r, J_pose, J_landmark, depth)``; Jacobians are None when not requested.
    Callers must mask observations with ``depth <= MIN_DEPTH``.
    """
    p_b = np.einsum("nji,nj->ni", R_wb, landmarks - t_wb)
    p_c = np.einsum("nji,nj->ni", R_bc, p_b - t_bc)
    z = p_c[:, 2]
    zs = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    u = camera.fx * p_c[:, 0] / zs + camera.cx
    v = camera.fy * p_c[:, 1] / zs + camera.cy
    r = measured - np.stack([u, v], axis=1)
    if not jacobians:
        return r, None, None, z
    n = len(z)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = camera.fx / zs
    Jproj[:, 0, 2] = -camera.fx * p_c[:, 0] / zs**2
    Jproj[:, 1, 1] = camera.fy / zs
    Jproj[:, 1, 2] = -camera.fy * p_c[:, 1] / zs**2
    A = -np.einsum("nij,nkj->nik", Jproj, R_bc)  # -Jproj * R_bc^T
    dpb = np.zeros((n, 3, 6))
    dpb[:, :, :3] = -np.eye(3)
    dpb[:, 0, 4] = -p_b[:, 2]
    dpb[:, 0, 5] = p_b[:, 1]
    dpb[:, 1, 3] = p_b[:, 2]
    dpb[:, 1, 5] = -p_b[:, 0]
    dpb[:, 2, 3] = -p_b[:, 1]
    dpb[:, 2, 4] = p_b[:, 0]
    J_pose = A @ dpb
    J_lm = np.einsum("nij,nkj->nik", A, R_wb)
    return r, J_pose, J_lm, z


@dataclass
class VisualResidualTerm:
    camera_index: int
    frame: int
    landmark: int
    measurement: np.ndarray
    information: np.ndarray


def visual_residual(term: VisualResidualTerm, pose: Pose, landmark, camera: PinholeCamera, body_T_cam: Pose):
    """Single-term residual and Jacobians (2x6 pose, 2x3 landmark)."""
    r, Jp, Jl, z = visual_residuals(pose.R[None], pose.t[None], body_T_cam.R[None], body_T_cam.t[None],
                                    np.asarray(landmark, float)[None], np.asarray(term.measurement, float)[None],
                                    camera)
    if z[0] <= MIN_DEPTH:
        raise BehindCamera(f"landmark {term.landmark} has depth {z[0]:.3g}")
    return r[0], Jp[0], Jl[0]


# ---------------------------------------------------------------------------
# inertial

@dataclass
class ImuNoise:
    """Continuous-time IMU noise densities used for information matrices."""

    gyro_sigma: float = 1.7e-4
    accel_sigma: float = 2.0e-3
    gyro_bias_walk: float = 1.9e-5
    accel_bias_walk: float = 3.0e-4


@dataclass
class Propagation:
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    D: np.ndarray | None = None     # d(theta, p, v)/d(state k), 9x15
    cov: np.ndarray | None = None   # covariance of (theta, p, v), 9x9


def propagate(R0, p0, v_body, bg, ba, imu_t, gyro, accel, jacobian=True, noise: ImuNoise | None = None):
    """Midpoint integration of bias-corrected IMU samples starting at state k.

    Velocity is tracked in the world frame internally. ``D`` stacks the exact
    derivatives of the discrete map w.r.t. the 15 state-k perturbations.
    """
    imu_t = np.asarray(imu_t, float)
    if len(imu_t) < 2:
        raise EmptySegment("IMU segment needs at least two samples")
    gyro = np.asarray(gyro, float)
    accel = np.asarray(accel, float)
    dts = np.diff(imu_t)
    wdts = (0.5 * (gyro[:-1] + gyro[1:]) - bg) * dts[:, None]
    Dls = batch_so3_exp(wdts)
    f_all = accel - ba
    need_lin = jacobian or noise is not None
    if need_lin:
        Jrs = batch_so3_right_jacobian(wdts)
        Fsk = batch_skew(f_all)
    R = np.array(R0, dtype=float)
    p = np.array(p0, dtype=float)
    v = R @ v_body
    I3 = np.eye(3)
    if jacobian:
        Dth = np.zeros((3, 15))
        Dth[:, 3:6] = I3
        Dp = np.zeros((3, 15))
        Dp[:, 0:3] = R
        Dv = np.zeros((3, 15))
        Dv[:, 3:6] = -R @ skew(v_body)
        Dv[:, 6:9] = R
    cov = np.zeros((9, 9)) if noise is not None else None
    for i in range(len(dts)):
        dt = dts[i]
        Dl = Dls[i]
        R1 = R @ Dl
        abar = 0.5 * (R @ f_all[i] + R1 @ f_all[i + 1]) + GRAVITY
        if need_lin:
            Jr = Jrs[i]
            S0 = R @ Fsk[i]
            S1 = R1 @ Fsk[i + 1]
        if jacobian:
            Dth1 = Dl.T @ Dth
            Dth1[:, 9:12] -= Jr * dt
            Da = -0.5 * (S0 @ Dth + S1 @ Dth1)
            Da[:, 12:15] -= 0.5 * (R + R1)
            Dp = Dp + Dv * dt + 0.5 * dt * dt * Da
            Dv = Dv + Da * dt
            Dth = Dth1
        if noise is not None:
            A = np.eye(9)
            Ath = -0.5 * (S0 + S1 @ Dl.T)
            A[0:3, 0:3] = Dl.T
            A[3:6, 0:3] = 0.5 * dt * dt * Ath
            A[3:6, 6:9] = dt * I3
            A[6:9, 0:3] = dt * Ath
            B = np.zeros((9, 6))
            Cw = -0.5 * S1 @ Jr * dt
            B[0:3, 0:3] = Jr * dt
            B[3:6, 0:3] = 0.5 * dt * dt * Cw
            B[6:9, 0:3] = dt * Cw
            B[3:6, 3:6] = 0.5 * dt * dt * I3
            B[6:9, 3:6] = dt * I3
            q = np.concatenate([np.full(3, noise.gyro_sigma**2 / dt), np.full(3, noise.accel_sigma**2 / dt)])
            cov = A @ cov @ A.T + (B * q) @ B.T
        p = p + v * dt + 0.5 * abar * dt * dt
        v = v + abar * dt
        R = R1
    D = np.vstack([Dth, Dp, Dv]) if jacobian else None
    return Propagation(R, p, v, D, cov)


@dataclass
class InertialResidualTerm:
    frame_k: int
    frame_k1: int
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    information: np.ndarray

    @property
    def dt(self):
        return float(self.imu_t[-1] - self.imu_t[0])


def inertial_information(pose_k: Pose, v_body, bg, ba, imu_t, gyro, accel, noise: ImuNoise):
    """Information of the 15-dim inertial residual by first-order covariance propagation."""
    prop = propagate(pose_k.R, pose_k.t, v_body, bg, ba, imu_t, gyro, accel, jacobian=False, noise=noise)
    Rt = prop.R.T
    # (theta, p, v) -> (rho, phi, v) expressed in the predicted body frame
    M = np.zeros((9, 9))
    M[0:3, 3:6] = Rt
    M[3:6, 0:3] = np.eye(3)
    M[6:9, 6:9] = Rt
    cov = np.zeros((15, 15))
    cov[:9, :9] = M @ prop.cov @ M.T
    dt = float(imu_t[-1] - imu_t[0])
    cov[9:12, 9:12] = np.eye(3) * noise.gyro_bias_walk**2 * dt
    cov[12:15, 12:15] = np.eye(3) * noise.accel_bias_walk**2 * dt
    cov = 0.5 * (cov + cov.T) + np.eye(15) * 1e-18
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


def make_inertial_term(k, k1, state_k, imu_t, gyro, accel, noise: ImuNoise):
    pose, v, bg, ba = state_k
    info = inertial_information(pose, v, bg, ba, imu_t, gyro, accel, noise)
    return InertialResidualTerm(k, k1, np.asarray(imu_t, float), np.asarray(gyro, float),
                                np.asarray(accel, float), info)


def inertial_residual(term: InertialResidualTerm, state_k, state_k1, jacobians=True):
    """Residual of state k1 against the IMU propagation of state k.

    ``state_*`` are tuples ``(pose, v_body, b_g, b_a)``. Returns the residual
    and, when requested, the 15x15 Jacobians w.r.t. ``[T_k, S_k]`` and
    ``[T_k1, S_k1]``.
    """
    pose_k, v_k, bg_k, ba_k = state_k
    pose_1, v_1, bg_1, ba_1 = state_k1
    prop = propagate(pose_k.R, pose_k.t, v_k, bg_k, ba_k, term.imu_t, term.gyro, term.accel, jacobian=jacobians)
    pred = Pose.from_rt(prop.R, prop.p)
    E = relative_pose(pred, pose_1)
    e_pose = log(E)
    R1 = pose_1.R
    u = R1.T @ prop.v
    r = np.concatenate([e_pose, u - v_1, bg_1 - bg_k, ba_1 - ba_k])
    if not jacobians:
        return r
    Jri = se3_right_jacobian_inv(e_pose)
    Phi = np.vstack([prop.R.T @ prop.D[3:6], prop.D[0:3]])
    Jk = np.zeros((15, 15))
    Jk[0:6] = -Jri @ adjoint(inverse(E)) @ Phi
    Jk[6:9] = R1.T @ prop.D[6:9]
    Jk[9:12, 9:12] = -np.eye(3)
    Jk[12:15, 12:15] = -np.eye(3)
    Jk1 = np.zeros((15, 15))
    Jk1[0:6, 0:6] = Jri
    Jk1[6:9, 3:6] = skew(u)
    Jk1[6:9, 6:9] = -np.eye(3)
    Jk1[9:15, 9:15] = np.eye(6)
    return r, Jk, Jk1

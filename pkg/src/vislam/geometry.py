"""SE(3) poses stored as unit quaternion + translation.

Conventions
-----------
* Quaternions are Hamilton, ordered ``(w, x, y, z)``.
* A :class:`Pose` ``T_ab`` maps points from frame ``b`` into frame ``a``.
* Tangent vectors ("twists") are 6-vectors ``[rho, phi]``: translational part
  first, rotation vector second.
* The retraction used by every optimizer is the right perturbation
  ``boxplus(T, d) = T * exp(d)``.

Besides the scalar :class:`Pose` API this module has a few vectorized helpers
(``batch_*``) working on stacks of rotation matrices; the pose graph uses them
to evaluate hundreds of edges without a Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vislam.errors import AngleNearPi

PI_MARGIN = 1e-6


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def batch_skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# series-safe coefficients, all vectorized over theta

def _coef_a(th):
    """sin(th)/th"""
    th = np.asarray(th, dtype=float)
    small = th < 1e-2
    t2 = th * th
    safe = np.where(small, 1.0, th)
    return np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)


def _coef_b(th):
    """(1 - cos th)/th^2"""
    th = np.asarray(th, dtype=float)
    small = th < 1e-2
    t2 = th * th
    safe = np.where(small, 1.0, th)
    return np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                    (1.0 - np.cos(safe)) / (safe * safe))


def _coef_c(th):
    """(th - sin th)/th^3"""
    th = np.asarray(th, dtype=float)
    small = th < 1e-2
    t2 = th * th
    safe = np.where(small, 1.0, th)
    return np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                    (safe - np.sin(safe)) / safe**3)


def _coef_d(th):
    """(th^2 + 2 cos th - 2)/(2 th^4)"""
    th = np.asarray(th, dtype=float)
    small = th < 1e-2
    t2 = th * th
    safe = np.where(small, 1.0, th)
    return np.where(small, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
                    (safe * safe + 2.0 * np.cos(safe) - 2.0) / (2.0 * safe**4))


def _coef_e(th):
    """(2 th - 3 sin th + th cos th)/(2 th^5)"""
    th = np.asarray(th, dtype=float)
    small = th < 1e-1
    t2 = th * th
    safe = np.where(small, 1.0, th)
    return np.where(small, 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
                    (2.0 * safe - 3.0 * np.sin(safe) + safe * np.cos(safe)) / (2.0 * safe**5))


def _coef_vinv(th):
    """(1 - th sin th / (2 (1 - cos th))) / th^2, the K^2 weight of V^-1."""
    th = np.asarray(th, dtype=float)
    small = th < 1e-2
    t2 = th * th
    safe = np.where(small, 1.0, th)
    full = (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / (safe * safe)
    return np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0, full)


# ---------------------------------------------------------------------------
# quaternions

def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0.0 else q


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def batch_matrix_to_quat(R):
    """Shepperd's method over a stack of rotation matrices; returns (..., 4) with w >= 0."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    n = R.shape[0]
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    choice = np.argmax(np.concatenate([tr[:, None], diag], axis=1), axis=1)
    q = np.empty((n, 4))

    m = choice == 0
    s = np.sqrt(1.0 + tr[m]) * 2.0
    q[m, 0] = 0.25 * s
    q[m, 1] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 2] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 3] = (R[m, 1, 0] - R[m, 0, 1]) / s

    m = choice == 1
    s = np.sqrt(1.0 + R[m, 0, 0] - R[m, 1, 1] - R[m, 2, 2]) * 2.0
    q[m, 0] = (R[m, 2, 1] - R[m, 1, 2]) / s
    q[m, 1] = 0.25 * s
    q[m, 2] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 3] = (R[m, 0, 2] + R[m, 2, 0]) / s

    m = choice == 2
    s = np.sqrt(1.0 + R[m, 1, 1] - R[m, 0, 0] - R[m, 2, 2]) * 2.0
    q[m, 0] = (R[m, 0, 2] - R[m, 2, 0]) / s
    q[m, 1] = (R[m, 0, 1] + R[m, 1, 0]) / s
    q[m, 2] = 0.25 * s
    q[m, 3] = (R[m, 1, 2] + R[m, 2, 1]) / s

    m = choice == 3
    s = np.sqrt(1.0 + R[m, 2, 2] - R[m, 0, 0] - R[m, 1, 1]) * 2.0
    q[m, 0] = (R[m, 1, 0] - R[m, 0, 1]) / s
    q[m, 1] = (R[m, 0, 2] + R[m, 2, 0]) / s
    q[m, 2] = (R[m, 1, 2] + R[m, 2, 1]) / s
    q[m, 3] = 0.25 * s

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q.reshape(shape + (4,))


def matrix_to_quat(R):
    return batch_matrix_to_quat(np.asarray(R)[None])[0]


def quat_from_rotvec(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi)
    half = 0.5 * th
    # sin(th/2)/th = 0.5 * sinc(th/2)
    k = 0.5 * _coef_a(half)
    return np.array([np.cos(half), k * phi[0], k * phi[1], k * phi[2]])


def quat_to_rotvec(q):
    """Rotation vector of a unit quaternion; the angle is returned in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = np.linalg.norm(v)
    th = 2.0 * np.arctan2(s, q[0])
    if s < 1e-12:
        return 2.0 * v / q[0]
    return v * (th / s)


# ---------------------------------------------------------------------------
# SO(3)

def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi)
    K = skew(phi)
    return np.eye(3) + _coef_a(th) * K + _coef_b(th) * (K @ K)


def batch_so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    K = batch_skew(phi)
    return (np.eye(3) + _coef_a(th)[..., None, None] * K
            + _coef_b(th)[..., None, None] * (K @ K))


def so3_log(R):
    return quat_to_rotvec(matrix_to_quat(R))


def batch_so3_log(R):
    q = batch_matrix_to_quat(R)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    th = 2.0 * np.arctan2(s, q[..., 0])
    scale = np.where(s < 1e-12, 2.0 / q[..., 0], th / np.where(s < 1e-12, 1.0, s))
    return v * scale[..., None]


def so3_right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi)
    K = skew(phi)
    return np.eye(3) - _coef_b(th) * K + _coef_c(th) * (K @ K)


def batch_so3_right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi, axis=-1)
    K = batch_skew(phi)
    return (np.eye(3) - _coef_b(th)[..., None, None] * K
            + _coef_c(th)[..., None, None] * (K @ K))


def so3_left_jacobian(phi):
    return so3_right_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = np.linalg.norm(phi)
    K = skew(phi)
    return np.eye(3) + 0.5 * K + _coef_vinv(th) * (K @ K)


# ---------------------------------------------------------------------------
# Pose

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with rotation ``q`` (w, x, y, z) and translation ``t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity():
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R, t):
        return Pose(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def act(self, p):
        """Transform point(s) ``p`` (shape (3,) or (n, 3))."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def translate(x, y, z):
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z], dtype=float))


def rot_z(angle, t=(0.0, 0.0, 0.0)):
    return Pose(np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)]), t)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(quat_multiply(a.q, b.q), a.t + quat_to_matrix(a.q) @ b.t)


def inverse(p: Pose) -> Pose:
    qi = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose(qi, -(quat_to_matrix(qi) @ p.t))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """``a^-1 * b``: the pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def exp(twist) -> Pose:
    twist = np.asarray(twist, dtype=float)
    rho, phi = twist[:3], twist[3:]
    th = np.linalg.norm(phi)
    K = skew(phi)
    V = np.eye(3) + _coef_b(th) * K + _coef_c(th) * (K @ K)
    return Pose(quat_from_rotvec(phi), V @ rho)


def log(p: Pose) -> np.ndarray:
    phi = quat_to_rotvec(p.q)
    th = np.linalg.norm(phi)
    if th > np.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {th:.9f} too close to pi")
    K = skew(phi)
    Vinv = np.eye(3) - 0.5 * K + _coef_vinv(th) * (K @ K)
    return np.concatenate([Vinv @ p.t, phi])


def boxplus(p: Pose, delta) -> Pose:
    return compose(p, exp(delta))


def boxminus(a: Pose, b: Pose) -> np.ndarray:
    """Local coordinates of ``a`` around ``b``: ``log(b^-1 a)``."""
    return log(relative_pose(b, a))


def adjoint(p: Pose) -> np.ndarray:
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(p.t) @ R
    A[3:, 3:] = R
    return A


def se3_left_jacobian_q(rho, phi):
    """The off-diagonal block Q(rho, phi) of the SE(3) left Jacobian."""
    th = np.linalg.norm(phi)
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (0.5 * Rh
            + _coef_c(th) * (PR + RP + PRP)
            + _coef_d(th) * (P @ PR + RP @ P - 3.0 * PRP)
            + _coef_e(th) * (PRP @ P + P @ PRP))


def se3_right_jacobian(twist) -> np.ndarray:
    twist = -np.asarray(twist, dtype=float)
    rho, phi = twist[:3], twist[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = se3_left_jacobian_q(rho, phi)
    return out


def se3_right_jacobian_inv(twist) -> np.ndarray:
    J = se3_right_jacobian(twist)
    Ji = np.linalg.inv(J[:3, :3])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ J[:3, 3:] @ Ji
    return out


# ---------------------------------------------------------------------------
# vectorized SE(3) on (R, t) stacks

def batch_se3_log(R, t):
    """Twists [rho, phi] for stacks ``R`` (n,3,3), ``t`` (n,3)."""
    phi = batch_so3_log(R)
    th = np.linalg.norm(phi, axis=-1)
    if np.any(th > np.pi - PI_MARGIN):
        raise AngleNearPi("rotation angle too close to pi in batch log")
    K = batch_skew(phi)
    Vinv = (np.eye(3) - 0.5 * K + _coef_vinv(th)[..., None, None] * (K @ K))
    rho = np.einsum("nij,nj->ni", Vinv, t)
    return np.concatenate([rho, phi], axis=-1)


def batch_se3_right_jacobian_inv(xi):
    """Closed-form inverse right Jacobians for a stack of twists (n, 6)."""
    xi = -np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    th = np.linalg.norm(phi, axis=-1)
    P = batch_skew(phi)
    Rh = batch_skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    c, d, e = (_coef_c(th)[:, None, None], _coef_d(th)[:, None, None],
               _coef_e(th)[:, None, None])
    Q = (0.5 * Rh + c * (PR + RP + PRP) + d * (P @ PR + RP @ P - 3.0 * PRP)
         + e * (PRP @ P + P @ PRP))
    # inverse of the SO(3) left Jacobian of phi (= right Jacobian inverse of -phi)
    Ji = np.eye(3) - 0.5 * P + _coef_vinv(th)[:, None, None] * (P @ P)
    out = np.zeros((xi.shape[0], 6, 6))
    out[:, :3, :3] = Ji
    out[:, 3:, 3:] = Ji
    out[:, :3, 3:] = -Ji @ Q @ Ji
    return out


def batch_se3_exp(xi):
    """Rotation and translation stacks of ``exp`` for twists (n, 6)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    th = np.linalg.norm(phi, axis=-1)
    K = batch_skew(phi)
    K2 = K @ K
    R = np.eye(3) + _coef_a(th)[:, None, None] * K + _coef_b(th)[:, None, None] * K2
    V = np.eye(3) + _coef_b(th)[:, None, None] * K + _coef_c(th)[:, None, None] * K2
    return R, np.einsum("nij,nj->ni", V, rho)


def batch_adjoint(R, t):
    n = R.shape[0]
    A = np.zeros((n, 6, 6))
    A[:, :3, :3] = R
    A[:, :3, 3:] = batch_skew(t) @ R
    A[:, 3:, 3:] = R
    return A


def poses_to_arrays(poses):
    R = np.stack([quat_to_matrix(p.q) for p in poses])
    t = np.stack([p.t for p in poses])
    return R, t


def arrays_to_poses(R, t):
    qs = batch_matrix_to_quat(R)
    return [Pose(q, ti) for q, ti in zip(qs, t)]


def rotation_angle(p: Pose) -> float:
    return float(np.linalg.norm(quat_to_rotvec(p.q)))


def random_pose(rng, trans_scale=1.0, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(quat_from_rotvec(axis * angle), rng.normal(scale=trans_scale, size=3))

"""2D-to-3D pose estimation: minimal P3P, linear PnP and RANSAC.

All poses returned here are camera poses in the frame of the 3D points
(points' frame <- camera), so ``pose.inverse() * X`` is in camera
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from vislam.camera import DEFAULT_CAMERA, PinholeCamera
from vislam.errors import Degenerate, NotEnoughCorrespondences, VerificationFailed
from vislam.geometry import Pose, boxplus, inverse
from vislam.vio.residuals import visual_residuals


@dataclass
class Correspondence2D3D:
    point3d: np.ndarray
    pixel: np.ndarray

    def __post_init__(self):
        self.point3d = np.asarray(self.point3d, float)
        self.pixel = np.asarray(self.pixel, float)
        if not (np.all(np.isfinite(self.point3d)) and np.all(np.isfinite(self.pixel))):
            raise ValueError("correspondence values must be finite")


@dataclass
class RansacConfig:
    threshold: float = 2.0        # px
    confidence: float = 0.99
    max_iters: int = 1000
    min_inliers: int = 12
    refine_iters: int = 10


@dataclass
class RansacResult:
    relative_pose: Pose
    inliers: np.ndarray
    iterations: int
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_inliers(self):
        return len(self.inliers)


# ---------------------------------------------------------------------------
# helpers

def rigid_align(src, dst):
    """Least-squares R, t with ``dst ~ R src + t`` (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    s = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, s]) @ U.T
    return R, cd - R @ cs


def reprojection_errors(pose: Pose, points, pixels, camera: PinholeCamera = DEFAULT_CAMERA):
    """Pixel error norms of ``points`` seen from camera ``pose``; inf behind the camera."""
    pc = (np.asarray(points, float) - pose.t) @ pose.R
    z = pc[:, 2]
    err = np.full(len(pc), np.inf)
    ok = z > 1e-9
    if ok.any():
        err[ok] = np.linalg.norm(camera.project(pc[ok]) - np.asarray(pixels, float)[ok], axis=1)
    return err


# ---------------------------------------------------------------------------
# minimal and linear solvers

def _polish_lengths(s, sides, cosines, iters=3):
    """Newton iterations on the three law-of-cosines equations for the ray lengths."""
    a2, b2, c2 = sides
    ca, cb, cg = cosines
    pairs = ((1, 2, ca, a2), (0, 2, cb, b2), (0, 1, cg, c2))
    for _ in range(iters):
        F = np.array([s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * c - d for i, j, c, d in pairs])
        J = np.zeros((3, 3))
        for row, (i, j, c, _d) in enumerate(pairs):
            J[row, i] = 2 * s[i] - 2 * s[j] * c
            J[row, j] = 2 * s[j] - 2 * s[i] * c
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        s = s - step
    return s


def p3p(points3d, bearings):
    """All camera poses consistent with three point-ray pairs.

    Ray lengths ``s_i`` satisfy the law of cosines for each side of the
    triangle. Writing ``s2 = u s1`` and ``s3 = v s1``, the difference of two
    of those equations is linear in ``u``; substituting back yields a quartic
    in ``v``. Each real positive root gives camera-frame points which are
    aligned to the world points in closed form.
    """
    X = np.asarray(points3d, float).reshape(3, 3)
    f = np.asarray(bearings, float).reshape(3, 3)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    if 0.5 * np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0])) < 1e-9:
        raise Degenerate("P3P points are collinear")
    a2 = np.sum((X[1] - X[2]) ** 2)
    b2 = np.sum((X[0] - X[2]) ** 2)
    c2 = np.sum((X[0] - X[1]) ** 2)
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    # u * D(v) = N(v)
    quad_b = np.array([1.0, -2.0 * cb, 1.0])              # 1 + v^2 - 2 v cb
    N = (a2 - c2) * quad_b - b2 * np.array([-1.0, 0.0, 1.0])
    D = 2.0 * b2 * np.array([cg, -ca])
    quartic = P.polysub(b2 * P.polyadd(P.polyadd(P.polymul(D, D), P.polymul(N, N)),
                                       -2.0 * cg * P.polymul(N, D)),
                        c2 * P.polymul(quad_b, P.polymul(D, D)))
    quartic = np.trim_zeros(np.asarray(quartic, float), "b")
    if len(quartic) < 2:
        return []
    roots = P.polyroots(quartic)
    poses = []
    for r in roots:
        if abs(r.imag) > 1e-7 * max(1.0, abs(r.real)):
            continue
        v = r.real
        den = P.polyval(v, D)
        if v <= 0 or abs(den) < 1e-12:
            continue
        u = P.polyval(v, N) / den
        if u <= 0:
            continue
        q = 1.0 + v * v - 2.0 * v * cb
        if q <= 0:
            continue
        s1 = np.sqrt(b2 / q)
        s = _polish_lengths(np.array([s1, u * s1, v * s1]), (a2, b2, c2), (ca, cb, cg))
        Xc = s[:, None] * f
        # consistency with the third side (rejects spurious roots)
        if abs(np.sum((Xc[1] - Xc[2]) ** 2) - a2) > 1e-6 * max(a2, 1.0):
            continue
        R, t = rigid_align(Xc, X)        # X = R Xc + t: world <- camera
        poses.append(Pose.from_rt(R, t))
    return poses


def dlt_pnp(points3d, pixels, camera: PinholeCamera = DEFAULT_CAMERA) -> Pose:
    """Linear PnP from >= 6 correspondences (normalized DLT)."""
    X = np.asarray(points3d, float)
    uv = np.asarray(pixels, float)
    n = len(X)
    if n < 6:
        raise NotEnoughCorrespondences("DLT needs at least 6 correspondences")
    x = (uv[:, 0] - camera.cx) / camera.fx
    y = (uv[:, 1] - camera.cy) / camera.fy
    mu = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.mean(np.linalg.norm(X - mu, axis=1)), 1e-12)
    Xn = (X - mu) * scale
    Xh = np.column_stack([Xn, np.ones(n)])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -x[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -y[:, None] * Xh
    _, _, Vt = np.linalg.svd(A)
    Pm = Vt[-1].reshape(3, 4)
    U, S, Wt = np.linalg.svd(Pm[:, :3])
    R = U @ Wt
    if np.linalg.det(R) < 0:
        R, Pm = -R, -Pm
        U, S, Wt = np.linalg.svd(Pm[:, :3])
        R = U @ Wt
    t = Pm[:, 3] / S.mean()
    # undo the normalization: x_c = R * scale * (X - mu) + t
    t_cam = t - scale * R @ mu
    R_cw, t_cw = R, t_cam / scale
    if np.median(((X @ R_cw.T) + t_cw)[:, 2]) < 0:
        raise Degenerate("DLT solution places the points behind the camera")
    return inverse(Pose.from_rt(R_cw, t_cw))


# ---------------------------------------------------------------------------
# refinement and RANSAC

def _cost(pose, X, uv, camera):
    e = reprojection_errors(pose, X, uv, camera)
    return float(np.sum(e * e))


def refine_pose(pose: Pose, points3d, pixels, camera: PinholeCamera = DEFAULT_CAMERA, iters=10):
    """Gauss-Newton on total reprojection cost; a step is kept only if it lowers the cost."""
    X = np.asarray(points3d, float)
    uv = np.asarray(pixels, float)
    n = len(X)
    I = np.broadcast_to(np.eye(3), (n, 3, 3))
    Z = np.zeros((n, 3))
    cost = _cost(pose, X, uv, camera)
    for _ in range(iters):
        r, Jp, _, z = visual_residuals(np.broadcast_to(pose.R, (n, 3, 3)), np.broadcast_to(pose.t, (n, 3)), I, Z,
                                       X, uv, camera)
        if np.any(z <= 1e-9):
            break
        H = np.einsum("nki,nkj->ij", Jp, Jp)
        g = np.einsum("nki,nk->i", Jp, r)
        try:
            dx = np.linalg.solve(H + 1e-12 * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        step = 1.0
        for _h in range(10):
            cand = boxplus(pose, step * dx)
            c = _cost(cand, X, uv, camera)
            if c < cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        done = cost - c < 1e-12 * max(cost, 1e-300) or np.linalg.norm(step * dx) < 1e-12
        pose, cost = cand, c
        if done:
            break
    return pose, cost


def _required_iterations(inlier_ratio, confidence, sample_size=3):
    w = inlier_ratio ** sample_size
    if w <= 0:
        return np.inf
    if w >= 1:
        return 1
    return np.log(1.0 - confidence) / np.log(1.0 - w)


def ransac_pnp(points3d, pixels, camera: PinholeCamera = DEFAULT_CAMERA, config: RansacConfig | None = None,
               rng=None) -> RansacResult:
    """Robust camera pose from 2D-3D matches; raises VerificationFailed on too few inliers."""
    cfg = config if config is not None else RansacConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = np.asarray(points3d, float).reshape(-1, 3)
    uv = np.asarray(pixels, float).reshape(-1, 2)
    n = len(X)
    if n < 4:
        raise NotEnoughCorrespondences(f"{n} correspondences, need at least 4")
    f = camera.bearings(uv)
    best_pose, best_inl, best_cost = None, np.zeros(0, int), np.inf
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        sample = rng.choice(n, 3, replace=False)
        try:
            cands = p3p(X[sample], f[sample])
        except Degenerate:
            continue
        for pose in cands:
            err = reprojection_errors(pose, X, uv, camera)
            inl = np.flatnonzero(err < cfg.threshold)
            c = float(np.sum(np.minimum(err, cfg.threshold) ** 2))
            if len(inl) > len(best_inl) or (len(inl) == len(best_inl) and c < best_cost):
                best_pose, best_inl, best_cost = pose, inl, c
                needed = _required_iterations(len(inl) / n, cfg.confidence)
    if (best_pose is None or len(best_inl) < 4) and n >= 6:
        try:
            pose = dlt_pnp(X, uv, camera)
            err = reprojection_errors(pose, X, uv, camera)
            best_pose, best_inl = pose, np.flatnonzero(err < cfg.threshold)
        except (Degenerate, np.linalg.LinAlgError):
            pass
    if best_pose is None or len(best_inl) < 3:
        raise VerificationFailed(f"no pose hypothesis after {it} iterations")
    pose = best_pose
    inl = best_inl
    for _ in range(2):
        pose, _ = refine_pose(pose, X[inl], uv[inl], camera, cfg.refine_iters)
        err = reprojection_errors(pose, X, uv, camera)
        new_inl = np.flatnonzero(err < cfg.threshold)
        if np.array_equal(new_inl, inl):
            break
        if len(new_inl) < len(inl):
            break
        inl = new_inl
    err = reprojection_errors(pose, X, uv, camera)
    inl = np.flatnonzero(err < cfg.threshold)
    if len(inl) < cfg.min_inliers:
        raise VerificationFailed(f"{len(inl)} inliers < {cfg.min_inliers}")
    return RansacResult(pose, inl, it, err)

"""Schur-complement marginalization into a linear Gaussian prior.

The prior is kept in square-root form ``r(x) = r0 + J * (x [-] x0)`` with
fixed ``J`` (first-estimate Jacobians) and a recorded linearization point
``x0`` per variable. Pose variables use ``log(T0^-1 T)`` as local difference,
everything else plain subtraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from vislam.errors import SingularBlock
from vislam.geometry import Pose, log, relative_pose, se3_right_jacobian_inv

logger = logging.getLogger(__name__)

SINGULAR_REG = 1e-9


@dataclass
class LinearFactor:
    keys: list
    jacobians: list
    residual: np.ndarray
    information: np.ndarray


def _local_diff(value, point):
    if isinstance(value, Pose):
        d = log(relative_pose(point, value))
        return d, se3_right_jacobian_inv(d)
    d = np.asarray(value, float) - np.asarray(point, float)
    return d, None


@dataclass
class MarginalPrior:
    keys: list
    dims: list
    J: np.ndarray
    r0: np.ndarray
    points: dict = field(default_factory=dict)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    @property
    def information(self):
        return self.J.T @ self.J

    def evaluate(self, values, jacobians=True):
        """Residual and per-key Jacobians at ``values`` (dict key -> value)."""
        off = self.offsets
        dx = np.zeros(off[-1])
        blocks = []
        for i, k in enumerate(self.keys):
            d, jr = _local_diff(values[k], self.points[k])
            dx[off[i]:off[i + 1]] = d
            blocks.append(jr)
        r = self.r0 + self.J @ dx
        if not jacobians:
            return r, None
        jacs = []
        for i, jr in enumerate(blocks):
            Jk = self.J[:, off[i]:off[i + 1]]
            jacs.append(Jk @ jr if jr is not None else Jk.copy())
        return r, jacs

    def cost(self, values):
        r, _ = self.evaluate(values, jacobians=False)
        return float(r @ r)

    def as_factor(self, values):
        r, jacs = self.evaluate(values)
        return LinearFactor(list(self.keys), jacs, r, np.eye(len(r)))


def assemble(factors, dims):
    """Dense normal equations ``H``, ``b = sum J^T W r`` over all keys touched."""
    keys = []
    for f in factors:
        for k in f.keys:
            if k not in keys:
                keys.append(k)
    off = {}
    n = 0
    for k in keys:
        off[k] = n
        n += dims[k]
    H = np.zeros((n, n))
    b = np.zeros(n)
    for f in factors:
        WJ = [f.information @ J for J in f.jacobians]
        for ka, Ja in zip(f.keys, f.jacobians):
            sa = slice(off[ka], off[ka] + dims[ka])
            b[sa] += Ja.T @ (f.information @ f.residual)
            for kb, WJb in zip(f.keys, WJ):
                sb = slice(off[kb], off[kb] + dims[kb])
                H[sa, sb] += Ja.T @ WJb
    return keys, H, b


def schur_complement(H, b, keep_idx, drop_idx, strict=False):
    Hmm = H[np.ix_(drop_idx, drop_idx)]
    Hmm = 0.5 * (Hmm + Hmm.T)
    ev = np.linalg.eigvalsh(Hmm) if len(drop_idx) else np.ones(1)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        if strict:
            raise SingularBlock(f"marginalized block is rank deficient (min eig {ev[0]:.3g})")
        logger.warning("marginalized block rank deficient (min eig %.3g); regularizing", ev[0])
        Hmm = Hmm + SINGULAR_REG * np.eye(len(drop_idx))
    Hrm = H[np.ix_(keep_idx, drop_idx)]
    X = np.linalg.solve(Hmm, np.column_stack([Hrm.T, b[drop_idx]]))
    Hs = H[np.ix_(keep_idx, keep_idx)] - Hrm @ X[:, :-1]
    bs = b[keep_idx] - Hrm @ X[:, -1]
    return 0.5 * (Hs + Hs.T), bs


def marginalize(factors, victims, dims, strict=False):
    """Eliminate ``victims`` from the linearized ``factors``.

    Returns ``(keys, H, b)`` over the retained keys; the induced cost is
    ``dx^T H dx + 2 b^T dx`` up to a constant.
    """
    keys, H, b = assemble(factors, dims)
    idx = {}
    n = 0
    for k in keys:
        idx[k] = np.arange(n, n + dims[k])
        n += dims[k]
    victims = [k for k in keys if k in set(victims)]
    kept = [k for k in keys if k not in set(victims)]
    drop_idx = np.concatenate([idx[k] for k in victims]) if victims else np.zeros(0, int)
    keep_idx = np.concatenate([idx[k] for k in kept]) if kept else np.zeros(0, int)
    Hs, bs = schur_complement(H, b, keep_idx, drop_idx, strict=strict)
    return kept, Hs, bs


def prior_from_normal_equations(keys, dims, H, b, points, eps=1e-14):
    """Square-root prior with ``J^T J = H`` and ``J^T r0 = b`` (PSD part of H)."""
    H = 0.5 * (H + H.T)
    S, U = np.linalg.eigh(H)
    keep = S > eps * max(S[-1], 1e-300) if len(S) else np.zeros(0, bool)
    S, U = S[keep], U[:, keep]
    sq = np.sqrt(S)
    J = sq[:, None] * U.T
    r0 = (U.T @ b) / sq
    return MarginalPrior(list(keys), [dims[k] for k in keys], J, r0, {k: points[k] for k in keys})

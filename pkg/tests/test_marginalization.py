import numpy as np
import pytest

from vislam.errors import SingularBlock
from vislam.vio.marginalization import LinearFactor, assemble, marginalize, schur_complement


def chain_factors(rng, n=3, d=2):
    """Linear-Gaussian chain: absolute factors on both ends, relative factors between neighbours."""
    keys = [("L", i) for i in range(n)]
    I = np.eye(d)
    fs = [LinearFactor([keys[0]], [I], rng.normal(size=d), np.diag(rng.uniform(1, 4, d)))]
    for a, b in zip(keys[:-1], keys[1:]):
        W = rng.normal(size=(d, d))
        fs.append(LinearFactor([a, b], [-I, I], rng.normal(size=d), W @ W.T + np.eye(d)))
    fs.append(LinearFactor([keys[-1]], [2 * I], rng.normal(size=d), np.eye(d)))
    return keys, {k: d for k in keys}, fs


def dense_solution(factors, keys, dims):
    """Weighted least squares on the stacked whitened system (independent of assemble)."""
    off = np.cumsum([0] + [dims[k] for k in keys])
    pos = {k: o for k, o in zip(keys, off)}
    rows, rhs = [], []
    for f in factors:
        L = np.linalg.cholesky(f.information)
        A = np.zeros((len(f.residual), off[-1]))
        for k, J in zip(f.keys, f.jacobians):
            A[:, pos[k]:pos[k] + dims[k]] = L.T @ J
        rows.append(A)
        rhs.append(-L.T @ f.residual)
    x, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return {k: x[pos[k]:pos[k] + dims[k]] for k in keys}


@pytest.mark.parametrize("seed", range(5))
def test_schur_reduced_solution_equals_full_solution(seed):
    rng = np.random.default_rng(seed)
    keys, dims, fs = chain_factors(rng, n=3)
    full = dense_solution(fs, keys, dims)
    kept, H, b = marginalize(fs, [keys[1]], dims)
    x = np.linalg.solve(H, -b)
    o = 0
    for k in kept:
        assert np.allclose(x[o:o + dims[k]], full[k], atol=1e-9)
        o += dims[k]


def test_longer_chain_multiple_victims():
    rng = np.random.default_rng(9)
    keys, dims, fs = chain_factors(rng, n=6, d=3)
    full = dense_solution(fs, keys, dims)
    kept, H, b = marginalize(fs, [keys[0], keys[2], keys[3]], dims)
    x = np.linalg.solve(H, -b)
    assert np.allclose(x, np.concatenate([full[k] for k in kept]), atol=1e-9)


def test_marginalized_landmark_couples_its_frames():
    rng = np.random.default_rng(1)
    T0, T1, L = ("T", 0), ("T", 1), ("L", 7)
    dims = {T0: 6, T1: 6, L: 3}
    fs = [LinearFactor([T0, L], [rng.normal(size=(2, 6)), rng.normal(size=(2, 3))], rng.normal(size=2), np.eye(2)),
          LinearFactor([T1, L], [rng.normal(size=(2, 6)), rng.normal(size=(2, 3))], rng.normal(size=2), np.eye(2)),
          LinearFactor([L], [np.eye(3)], np.zeros(3), np.eye(3))]
    keys, H0, _ = assemble(fs, dims)
    assert np.allclose(H0[0:6, 9:15], 0.0) or keys != [T0, L, T1]
    kept, H, _ = marginalize(fs, [L], dims)
    assert kept == [T0, T1]
    assert np.abs(H[0:6, 6:12]).max() > 1e-6
    assert np.allclose(H, H.T)


def test_singular_block_regularized_or_raised():
    H = np.diag([1.0, 2.0, 0.0])
    b = np.array([1.0, 1.0, 0.0])
    with pytest.raises(SingularBlock):
        schur_complement(H, b, np.array([0]), np.array([1, 2]), strict=True)
    Hs, bs = schur_complement(H, b, np.array([0]), np.array([1, 2]))
    assert np.isfinite(Hs).all() and np.isfinite(bs).all()

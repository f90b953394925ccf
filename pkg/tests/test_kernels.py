"""The compiled (loop) and vectorised kernels must agree."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvdepth import _accel, kernels

TOL = dict(rtol=1e-10, atol=1e-12)


def _spd(rng, m):
    A = rng.normal(size=(m, m))
    return A @ A.T / m + 0.1 * np.eye(m)


def test_backend_names_agree():
    assert _accel.BACKEND in ("numba", "numpy")
    expected = kernels._knn_normals_loop if _accel.HAVE_NUMBA else kernels._knn_normals_numpy
    assert kernels.knn_normals is expected


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.sampled_from([0.0, 3.0, 4.0]),
       st.booleans())
def test_warp_matrices(seed, n, trunc, exact):
    rng = np.random.default_rng(seed)
    x = rng.uniform(20, 200, n)
    fD = rng.uniform(0, 800)
    sigma = rng.uniform(0.3, 2.0)
    C = rng.uniform(0.2, 1.0, n)
    a = kernels._warp_matrices_loop(x, fD, sigma, trunc, C, exact)
    b = kernels._warp_matrices_numpy(x, fD, sigma, trunc, C, exact)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, **TOL)


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 6))
def test_band_weights(seed, n, T):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(n, 6))
    M = _spd(rng, 6)
    np.testing.assert_allclose(kernels._band_weights_loop(F, M, T),
                               kernels._band_weights_numpy(F, M, T), **TOL)


@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_glr_value_grad(seed, p):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(p, 6))
    c = rng.uniform(0, 5, p) * (rng.random(p) > 0.2)
    M = _spd(rng, 6)
    va, ga = kernels._glr_value_grad_loop(D, c, M)
    vb, gb = kernels._glr_value_grad_numpy(D, c, M)
    assert va == pytest.approx(vb, rel=1e-10)
    np.testing.assert_allclose(ga, gb, **TOL)


@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(3, 20))
def test_grid_normals(seed, rows, n):
    rng = np.random.default_rng(seed)
    uu, vv = np.meshgrid(np.arange(n), np.arange(rows))
    P = np.stack([uu, vv, 10 + 0.3 * uu + 0.1 * vv + rng.normal(0, 0.05, uu.shape)], -1).astype(float)
    valid = rng.random((rows, n)) > 0.15
    row = int(rng.integers(rows))
    na, fa = kernels._grid_normals_loop(P, valid, row)
    nb, fb = kernels._grid_normals_numpy(P, valid, row)
    np.testing.assert_array_equal(fa, fb)
    np.testing.assert_allclose(na, nb, atol=1e-8)


@given(st.integers(0, 2**32 - 1), st.integers(5, 12))
def test_knn_normals(seed, k):
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(80, 3)) * [4, 4, 0.5] + [0, 0, 30]
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    na, fa = kernels._knn_normals_loop(pts, idx)
    nb, fb = kernels._knn_normals_numpy(pts, idx)
    np.testing.assert_array_equal(fa, fb)
    np.testing.assert_allclose(na, nb, atol=1e-8)


def test_degenerate_knn_default():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.ones(10)])
    idx = np.tile(np.arange(4, dtype=np.int64), (10, 1))
    for fn in (kernels._knn_normals_loop, kernels._knn_normals_numpy):
        normals, flags = fn(pts, idx)
        assert flags.all()
        np.testing.assert_array_equal(normals, np.tile([0, 0, -1.0], (10, 1)))


def test_numpy_backend_via_env():
    import os
    import subprocess
    import sys

    code = "from mvdepth import _accel, kernels; print(_accel.BACKEND, kernels.knn_normals.__name__)"
    env = {**os.environ, "MVDEPTH_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.split() == ["numpy", "_knn_normals_numpy"]

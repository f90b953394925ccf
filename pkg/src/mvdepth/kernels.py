"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba and
a vectorised numpy version.  The public names at the bottom of the module
point at whichever backend :mod:`mvdepth._accel` selected; both versions are
importable under their private names so tests and benchmarks can compare
them.
"""
import math
import warnings

import numpy as np

from ._accel import HAVE_NUMBA, njit

__all__ = [
    "warp_matrices",
    "band_weights",
    "glr_value_grad",
    "grid_normals",
    "knn_normals",
]


# ---------------------------------------------------------------------------
# view warp: interpolation weights W(x) and Jacobian of g(x) = W(x) x
# ---------------------------------------------------------------------------

@njit
def _warp_matrices_loop(x, fD, sigma_s, trunc, C, exact):
    n = x.shape[0]
    inv_s2 = 1.0 / (sigma_s * sigma_s)
    if trunc > 0.0:
        reach = trunc * sigma_s
        floor = math.exp(-trunc * trunc)
    else:
        reach = np.inf
        floor = 0.0
    E = np.zeros((n, n))
    K = np.zeros((n, n))  # d e_ij / d x_j
    for j in range(n):
        delta = fD / x[j]
        s = j - delta
        if reach < np.inf:
            lo = max(0, int(math.ceil(s - reach)))
            hi = min(n - 1, int(math.floor(s + reach)))
        else:
            lo = 0
            hi = n - 1
        for i in range(lo, hi + 1):
            r = s - i
            g = math.exp(-r * r * inv_s2)
            e = g - floor
            if e < 0.0:
                e = 0.0
            E[i, j] = e
            # derivative of e_ij with respect to x_j
            K[i, j] = g * (-2.0 * r * inv_s2) * (delta / x[j])
    S = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += E[i, j]
        S[i] = acc
    W = np.zeros((n, n))
    H = np.zeros((n, n))
    for i in range(n):
        if exact:
            if S[i] <= 0.0:
                continue
            scale = 1.0 / S[i]
        else:
            scale = C[i]
        gi = 0.0
        for j in range(n):
            W[i, j] = scale * E[i, j]
            gi += W[i, j] * x[j]
        for j in range(n):
            if exact:
                H[i, j] = W[i, j] + (x[j] - gi) * K[i, j] * scale
            else:
                H[i, j] = W[i, j] + x[j] * K[i, j] * scale
    return W, H, S


def _warp_matrices_numpy(x, fD, sigma_s, trunc, C, exact):
    n = x.shape[0]
    inv_s2 = 1.0 / (sigma_s * sigma_s)
    delta = fD / x
    s = np.arange(n) - delta
    r = s[None, :] - np.arange(n)[:, None]
    g = np.exp(-r * r * inv_s2)
    if trunc > 0.0:
        inside = np.abs(r) <= trunc * sigma_s
        g = np.where(inside, g, 0.0)
        E = np.where(inside, np.maximum(g - math.exp(-trunc * trunc), 0.0), 0.0)
    else:
        E = g
    K = g * (-2.0 * r * inv_s2) * (delta / x)[None, :]
    S = E.sum(axis=1)
    if exact:
        with np.errstate(divide="ignore"):
            scale = np.where(S > 0.0, 1.0 / np.where(S > 0.0, S, 1.0), 0.0)
    else:
        scale = np.asarray(C, dtype=float)
    W = scale[:, None] * E
    gx = W @ x
    if exact:
        H = W + (x[None, :] - gx[:, None]) * K * scale[:, None]
    else:
        H = W + x[None, :] * K * scale[:, None]
    return W, H, S


# ---------------------------------------------------------------------------
# banded feature graph
# ---------------------------------------------------------------------------

@njit
def _band_weights_loop(F, M, T):
    n, m = F.shape
    out = np.zeros((n, T))
    diff = np.empty(m)
    for i in range(n):
        for k in range(T):
            j = i + k + 1
            if j >= n:
                break
            for a in range(m):
                diff[a] = F[i, a] - F[j, a]
            d = 0.0
            for a in range(m):
                row = 0.0
                for b in range(m):
                    row += M[a, b] * diff[b]
                d += diff[a] * row
            if d < 0.0:
                d = 0.0
            out[i, k] = math.exp(-d)
    return out


def _band_weights_numpy(F, M, T):
    n = F.shape[0]
    out = np.zeros((n, T))
    for k in range(min(T, n - 1)):
        diff = F[: n - k - 1] - F[k + 1:]
        d = np.einsum("pa,ab,pb->p", diff, M, diff)
        out[: n - k - 1, k] = np.exp(-np.maximum(d, 0.0))
    return out


# ---------------------------------------------------------------------------
# graph Laplacian regulariser as a function of the metric
# ---------------------------------------------------------------------------

@njit
def _glr_value_grad_loop(D, c, M):
    p, m = D.shape
    G = np.zeros((m, m))
    total = 0.0
    for q in range(p):
        if c[q] == 0.0:
            continue
        d = 0.0
        for a in range(m):
            row = 0.0
            for b in range(m):
                row += M[a, b] * D[q, b]
            d += D[q, a] * row
        w = c[q] * math.exp(-d)
        total += w
        for a in range(m):
            for b in range(m):
                G[a, b] -= w * D[q, a] * D[q, b]
    return total, G


def _glr_value_grad_numpy(D, c, M):
    d = np.einsum("pa,ab,pb->p", D, M, D)
    w = c * np.exp(-d)
    return float(w.sum()), -np.einsum("p,pa,pb->ab", w, D, D)


# ---------------------------------------------------------------------------
# PCA plane normals
# ---------------------------------------------------------------------------

@njit
def _pca_normal(pts, count):
    """Return (normal, degenerate) for the first ``count`` rows of ``pts``."""
    normal = np.array([0.0, 0.0, 1.0])
    if count < 3:
        return normal, True
    mean = np.zeros(3)
    for q in range(count):
        for a in range(3):
            mean[a] += pts[q, a]
    mean /= count
    cov = np.zeros((3, 3))
    for q in range(count):
        for a in range(3):
            for b in range(3):
                cov[a, b] += (pts[q, a] - mean[a]) * (pts[q, b] - mean[b])
    vals, vecs = np.linalg.eigh(cov)
    if vals[1] <= 1e-12 * max(vals[2], 1e-300):
        return normal, True
    for a in range(3):
        normal[a] = vecs[a, 0]
    return normal, False


@njit
def _grid_normals_loop(P, valid, row):
    n = P.shape[1]
    rows = P.shape[0]
    out = np.zeros((n, 3))
    flags = np.zeros(n, dtype=np.bool_)
    buf = np.empty((9, 3))
    for j in range(n):
        count = 0
        for r in range(max(0, row - 1), min(rows, row + 2)):
            for c in range(max(0, j - 1), min(n, j + 2)):
                if valid[r, c]:
                    for a in range(3):
                        buf[count, a] = P[r, c, a]
                    count += 1
        normal, degenerate = _pca_normal(buf, count)
        if normal[2] < 0.0:
            normal = -normal
        out[j] = normal
        flags[j] = degenerate
    return out, flags


def _batched_pca(nbrs, counts):
    """Smallest-variance direction for each (k, 3) neighbourhood in ``nbrs``.

    Missing neighbours are NaN rows; they drop out of the covariance.
    """
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(nbrs, axis=1)
    centred = np.nan_to_num(nbrs - mean[:, None, :])
    cov = np.einsum("nka,nkb->nab", centred, centred)
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    degenerate = (counts < 3) | (vals[:, 1] <= 1e-12 * np.maximum(vals[:, 2], 1e-300))
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, degenerate


def _grid_normals_numpy(P, valid, row):
    rows, n = valid.shape
    lo, hi = max(0, row - 1), min(rows, row + 2)
    block = np.where(valid[lo:hi, :, None], P[lo:hi], np.nan)
    padded = np.full((hi - lo, n + 2, 3), np.nan)
    padded[:, 1:-1] = block
    nbrs = np.concatenate([padded[:, c:c + n] for c in range(3)], axis=0)
    nbrs = nbrs.transpose(1, 0, 2)
    counts = np.sum(~np.isnan(nbrs[:, :, 0]), axis=1)
    normals, degenerate = _batched_pca(nbrs, counts)
    normals[normals[:, 2] < 0.0] *= -1.0
    return normals, degenerate


@njit
def _knn_normals_loop(points, idx):
    n, k = idx.shape
    out = np.zeros((n, 3))
    flags = np.zeros(n, dtype=np.bool_)
    buf = np.empty((k, 3))
    for p in range(n):
        for q in range(k):
            for a in range(3):
                buf[q, a] = points[idx[p, q], a]
        normal, degenerate = _pca_normal(buf, k)
        if degenerate:
            normal = np.array([0.0, 0.0, -1.0])
        elif normal[0] * points[p, 0] + normal[1] * points[p, 1] + normal[2] * points[p, 2] > 0.0:
            normal = -normal
        out[p] = normal
        flags[p] = degenerate
    return out, flags


def _knn_normals_numpy(points, idx):
    nbrs = points[idx]
    counts = np.full(idx.shape[0], idx.shape[1])
    normals, degenerate = _batched_pca(nbrs, counts)
    normals[degenerate] = (0.0, 0.0, -1.0)
    away = np.einsum("na,na->n", normals, points) > 0.0
    normals[away & ~degenerate] *= -1.0
    return normals, degenerate


if HAVE_NUMBA:
    warp_matrices = _warp_matrices_loop
    band_weights = _band_weights_loop
    glr_value_grad = _glr_value_grad_loop
    grid_normals = _grid_normals_loop
    knn_normals = _knn_normals_loop
else:
    warp_matrices = _warp_matrices_numpy
    band_weights = _band_weights_numpy
    glr_value_grad = _glr_value_grad_numpy
    grid_normals = _grid_normals_numpy
    knn_normals = _knn_normals_numpy

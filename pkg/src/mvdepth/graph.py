"""Per-row feature graphs with a learned Mahalanobis metric.

Each pixel carries a 6-vector (unit surface normal, depth, row, column).
Pixels within ``T`` columns of each other are connected with weight
``exp(-(f_i - f_j)^T M (f_i - f_j))``; ``M`` is learned by minimising the
graph Laplacian regulariser of recently enhanced rows subject to
``M >= eps_pd * I`` and ``trace(M) = F``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .scene_io import CameraRig


N_FEATURES = 6


@dataclass(frozen=True)
class GraphConfig:
    T: int = 4
    eps_pd_rel: float = 1e-6
    max_outer: int = 100
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("bandwidth T must be >= 1")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    M: np.ndarray
    history: list = field(default_factory=list)
    no_information: bool = False

    @property
    def eps_pd(self) -> float:
        return 1e-6 * np.trace(self.M) / self.M.shape[0]


@dataclass(frozen=True, eq=False)
class GraphLaplacian:
    L: sp.csr_matrix
    T: int

    def quad(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.L @ x))


def identity_metric(F: int = N_FEATURES) -> np.ndarray:
    return np.eye(F)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def backproject_row(z, v, rig: CameraRig) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    u = np.arange(z.size, dtype=float)
    return np.stack([(u - rig.cx) * z / rig.f, (v - rig.cy) * z / rig.f, z], axis=1)


def compute_features(row_index: int, window, current, rig: CameraRig, depth_scale: float,
                     window_mask=None, current_mask=None) -> FeatureMatrix:
    """Features of row ``row_index`` given the rows above it (oldest first).

    Normals come from a PCA plane fit over each pixel's 3x3 neighbourhood
    drawn from the current row and the two rows above it, with the sign
    fixed so that ``n_z >= 0``.
    """
    current = np.asarray(current, dtype=float)
    window = np.asarray(window, dtype=float).reshape(-1, current.size)[-2:]
    rows = np.vstack([window, current[None]])
    if current_mask is None:
        current_mask = current > 0
    if window_mask is None:
        window_mask = window > 0
    window_mask = np.asarray(window_mask, dtype=bool).reshape(-1, current.size)[-2:]
    valid = np.vstack([window_mask, np.asarray(current_mask, dtype=bool)[None]])
    first = row_index - (len(rows) - 1)
    pts = np.stack([backproject_row(r, first + k, rig) for k, r in enumerate(rows)])
    normals, degenerate = kernels.grid_normals(np.ascontiguousarray(pts), valid, len(rows) - 1)
    n = current.size
    feats = np.empty((n, N_FEATURES))
    feats[:, :3] = normals
    feats[:, 3] = current / depth_scale
    feats[:, 4] = row_index / rig.height
    feats[:, 5] = np.arange(n) / rig.width
    return FeatureMatrix(feats, degenerate)


def feature_distance(f_i, f_j, M) -> float:
    diff = np.asarray(f_i, dtype=float) - np.asarray(f_j, dtype=float)
    return max(float(diff @ np.asarray(M) @ diff), 0.0)


def edge_weight(d):
    return np.exp(-np.asarray(d, dtype=float))


def _values(features) -> np.ndarray:
    return np.ascontiguousarray(getattr(features, "values", features), dtype=float)


def build_laplacian(features, M, T: int, active=None) -> GraphLaplacian:
    """Band graph over one row; edges touching inactive pixels are dropped."""
    F = _values(features)
    n = F.shape[0]
    bands = kernels.band_weights(F, np.ascontiguousarray(M, dtype=float), int(T))
    if active is not None:
        active = np.asarray(active, dtype=bool)
        for k in range(bands.shape[1]):
            ok = np.zeros(n, dtype=bool)
            ok[: n - k - 1] = active[: n - k - 1] & active[k + 1:]
            bands[:, k] = np.where(ok, bands[:, k], 0.0)
    rows, cols, vals = [], [], []
    for k in range(min(T, n - 1)):
        i = np.arange(n - k - 1)
        w = bands[: n - k - 1, k]
        rows += [i, i + k + 1]
        cols += [i + k + 1, i]
        vals += [w, w]
    if rows:
        adj = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n, n))
    else:
        adj = sp.csr_matrix((n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return GraphLaplacian(sp.diags(deg).tocsr() - adj, T)


# ---------------------------------------------------------------------------
# metric learning
# ---------------------------------------------------------------------------

def _pairs(training, T):
    """Stack feature differences and squared signal differences of every edge."""
    diffs, coefs = [], []
    for item in training:
        x, features = item[0], item[1]
        mask = item[2] if len(item) > 2 else None
        x = np.asarray(x, dtype=float)
        F = _values(features)
        n = x.size
        for k in range(1, min(T, n - 1) + 1):
            dx = x[:-k] - x[k:]
            df = F[:-k] - F[k:]
            if mask is not None:
                keep = mask[:-k] & mask[k:]
                dx, df = dx[keep], df[keep]
            diffs.append(df)
            coefs.append(dx * dx)
    if not diffs:
        return np.zeros((0, N_FEATURES)), np.zeros(0)
    return np.ascontiguousarray(np.vstack(diffs)), np.concatenate(coefs)


def glr_objective(M, training, T: int) -> float:
    """Sum over training rows of ``x^T L(M) x``."""
    D, c = _pairs(training, T)
    return kernels.glr_value_grad(D, c, np.ascontiguousarray(M, dtype=float))[0]


def _shifted_simplex(vals, total, floor):
    """Euclidean projection of ``vals`` onto ``{v >= floor, sum v = total}``."""
    vals = np.asarray(vals, dtype=float)
    w = vals - floor
    budget = total - floor * vals.size
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - budget
    ks = np.arange(1, u.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(w - tau, 0.0) + floor


def project_metric(M, trace: float, eps_pd: float) -> np.ndarray:
    """Nearest symmetric matrix with eigenvalues >= eps_pd and the given trace."""
    M = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(M)
    # a small margin keeps the floor intact after re-assembly round-off
    vals = _shifted_simplex(vals, trace, eps_pd * 1.001)
    out = (vecs * vals) @ vecs.T
    out = 0.5 * (out + out.T)
    return out + np.eye(len(out)) * (trace - np.trace(out)) / len(out)


def learn_metric(training, M_init=None, cfg: GraphConfig = GraphConfig()) -> MetricMatrix:
    """Alternating diagonal / off-diagonal projected descent on the GLR.

    ``training`` is a sequence of ``(signal, features[, mask])`` rows.  Every
    accepted step strictly lowers the objective, so the returned history is
    non-increasing.
    """
    D, c = _pairs(training, cfg.T)
    F = D.shape[1]
    M = identity_metric(F) if M_init is None else np.array(M_init, dtype=float)
    trace = float(F)
    eps_pd = cfg.eps_pd_rel * trace / F

    def f_and_grad(A):
        return kernels.glr_value_grad(D, c, np.ascontiguousarray(A))

    fval, G = f_and_grad(M)
    if not np.any(c) or fval == 0.0:
        return MetricMatrix(M, [fval], no_information=True)

    history = [fval]
    step = {"diag": 1.0, "off": 1.0}
    off_mask = ~np.eye(F, dtype=bool)

    def try_block(kind, M, fval, G):
        if kind == "diag":
            g = np.diag(G)
        else:
            g = np.where(off_mask, G, 0.0)
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            return M, fval, G
        s = step[kind] / gnorm
        for _ in range(20):
            if kind == "diag":
                trial = M.copy()
                new_diag = _shifted_simplex(np.diag(M) - s * g, trace, eps_pd)
                trial[np.diag_indices(F)] = new_diag
                if np.linalg.eigvalsh(trial)[0] < eps_pd:
                    trial = project_metric(trial, trace, eps_pd)
            else:
                trial = project_metric(M - s * g, trace, eps_pd)
            f_new, G_new = f_and_grad(trial)
            if f_new < fval:
                step[kind] = min(step[kind] * 2.0, 1e6)
                return trial, f_new, G_new
            s *= 0.5
            step[kind] *= 0.5
        return M, fval, G

    for _ in range(cfg.max_outer):
        f_prev = fval
        M, fval, G = try_block("diag", M, fval, G)
        M, fval, G = try_block("off", M, fval, G)
        assert fval <= f_prev, "metric learning must not increase the GLR"
        history.append(fval)
        if f_prev - fval <= cfg.rel_tol * abs(f_prev):
            break
    return MetricMatrix(M, history)

"""Row-by-row joint enhancement of a rectified depth-image pair."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import graph, noise_model, solver, warp
from .scene_io import CameraRig, DepthImage, FormatError, RunConfig, _section

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    sigma_n2: float
    Q: float
    depth_scale: float
    K: int = 10
    K_n: int = 30
    pass_count: int = 2
    lambda_l: float = 1.0
    lambda_r: float = 1.0
    precision_reg: float = 1e-3
    single_view: bool = False
    warp: warp.WarpConfig = field(default_factory=warp.WarpConfig)
    graph: graph.GraphConfig = field(default_factory=graph.GraphConfig)
    solver: solver.SolverConfig = field(default_factory=solver.SolverConfig)

    def __post_init__(self):
        if self.K < 1 or self.K_n < 1:
            raise ValueError("K and K_n must be >= 1")
        if self.pass_count < 1:
            raise ValueError("pass_count must be >= 1")
        if not self.sigma_n2 > 0:
            raise ValueError("the solver needs a positive noise variance")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")


_PIPELINE_KEYS = {"K", "pass_count", "lambda_l", "lambda_r", "single_view"}
_NOISE_KEYS = {"K_n", "precision_reg"}


def _pick(section: dict, allowed: set, name: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise FormatError(f"unknown {name} keys: {sorted(unknown)}")
    return dict(section)


def config_from_run(run: RunConfig, sigma_n2: float, Q: float, depth_scale: float,
                    single_view: bool | None = None) -> PipelineConfig:
    """Assemble a PipelineConfig from the JSON sections of a run config."""
    kw = _pick(run.pipeline, _PIPELINE_KEYS, "pipeline")
    kw.update(_pick(run.noise, _NOISE_KEYS, "noise"))
    if single_view is not None:
        kw["single_view"] = bool(single_view)
    return PipelineConfig(
        sigma_n2=float(sigma_n2), Q=float(Q), depth_scale=float(depth_scale),
        warp=_section(warp.WarpConfig, run.warp),
        graph=_section(graph.GraphConfig, run.graph),
        solver=_section(solver.SolverConfig, run.solver),
        **kw,
    )


@dataclass
class _View:
    rows: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    features: list = field(default_factory=list)
    residuals: deque = None
    metric: np.ndarray = field(default_factory=graph.identity_metric)

    def window(self, n):
        if not self.rows:
            return np.zeros((0, n)), np.zeros((0, n), dtype=bool)
        return np.array(self.rows[-2:]), np.array(self.masks[-2:])


class EnhancementState:
    """History carried from one row to the next."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.left = _View(residuals=deque(maxlen=cfg.K_n))
        self.right = _View(residuals=deque(maxlen=cfg.K_n))
        self.rows_since_refresh = 0
        self.refreshes = 0

    @property
    def n_rows(self) -> int:
        return len(self.left.rows)

    def precision(self, view: _View, n: int, row_index: int) -> noise_model.PrecisionEstimate:
        cfg = self.cfg
        if row_index <= cfg.K or not view.residuals:
            return noise_model.PrecisionEstimate.isotropic(n, cfg.sigma_n2)
        return noise_model.estimate_precision(np.array(view.residuals), cfg.sigma_n2,
                                              cfg.precision_reg)

    def maybe_refresh(self) -> bool:
        """Re-learn both metrics once every K rows from the last K enhanced rows."""
        cfg = self.cfg
        if self.rows_since_refresh < cfg.K:
            return False
        self.rows_since_refresh = 0
        for view in (self.left, self.right):
            training = list(zip(view.rows[-cfg.K:], view.features[-cfg.K:], view.masks[-cfg.K:]))
            result = graph.learn_metric(training, view.metric, cfg.graph)
            view.metric = result.M
        self.refreshes += 1
        return True


def _fill_invalid(y, mask):
    """Linear interpolation across invalid pixels so the warp sees positive depths."""
    if mask.all():
        return y.copy()
    idx = np.flatnonzero(mask)
    return np.interp(np.arange(y.size), idx, y[idx])


def _features(view: _View, i, row, mask, rig, cfg):
    window, wmask = view.window(row.size)
    return graph.compute_features(i, window, row, rig, cfg.depth_scale, wmask, mask)


def enhance_row_pair(i: int, y_l, y_r, state: EnhancementState, rig: CameraRig,
                     mask_l=None, mask_r=None):
    """Enhance row ``i`` of both views; returns ``(x_l, x_r, record)``."""
    cfg = state.cfg
    y_l = np.asarray(y_l, dtype=float)
    y_r = np.asarray(y_r, dtype=float)
    mask_l = y_l > 0 if mask_l is None else np.asarray(mask_l, dtype=bool)
    mask_r = y_r > 0 if mask_r is None else np.asarray(mask_r, dtype=bool)
    record = {"row": i, "fallback": False, "passes": []}

    if mask_l.sum() < 2:
        x_l, x_r = y_l.copy(), y_r.copy()
        record["fallback"] = True
        record["warning"] = "fewer than two valid left pixels"
    else:
        x_l, x_r = _solve_row(i, y_l, y_r, mask_l, mask_r, state, rig, record)

    left, right = state.left, state.right
    for view, x, y, m in ((left, x_l, y_l, mask_l), (right, x_r, y_r, mask_r)):
        feats = _features(view, i, x, m, rig, cfg)
        view.rows.append(x)
        view.masks.append(m)
        view.features.append(feats)
        view.residuals.append(np.where(m, y - x, 0.0))
    state.rows_since_refresh += 1
    record["metric_refreshed"] = state.maybe_refresh()
    return x_l, x_r, record


def _solve_row(i, y_l, y_r, mask_l, mask_r, state, rig, record):
    cfg = state.cfg
    n = y_l.size
    yl = _fill_invalid(y_l, mask_l)
    exact = warp.WarpConfig(cfg.warp.sigma_s, warp.EXACT, cfg.warp.C, cfg.warp.truncate)

    feats_l = _features(state.left, i, yl, mask_l, rig, cfg)
    L_l = graph.build_laplacian(feats_l, state.left.metric, cfg.graph.T)
    P_l = state.precision(state.left, n, i)
    P_r = state.precision(state.right, n, i)

    x0 = yl
    x = yl
    try:
        for _ in range(cfg.pass_count):
            lin = warp.linearize(x0, rig, cfg.warp)
            active_r = lin.covered & mask_r
            al = noise_model.affine_approx(yl, x0, P_l, cfg.Q, drop=~mask_l)
            if cfg.single_view:
                ar = noise_model.AffineLikelihood(np.zeros(n), 1.0, cfg.Q, np.zeros(n))
                L_r, lam_r = np.zeros((n, n)), 0.0
            else:
                yr_fill = np.where(active_r, y_r, lin(x0))
                ar = noise_model.affine_approx(yr_fill, lin(x0), P_r, cfg.Q, drop=~active_r)
                feats_r = _features(state.right, i, np.where(mask_r, y_r, lin(x0)), mask_r,
                                    rig, cfg)
                L_r = graph.build_laplacian(feats_r, state.right.metric, cfg.graph.T,
                                            active=active_r)
                lam_r = cfg.lambda_r
            ctx = solver.RowContext.from_parts(yl, yr_fill if not cfg.single_view else y_r,
                                               al, ar, L_l, L_r, lin, cfg.lambda_l, lam_r)
            x, trace = solver.fgm_solve(x0, ctx, cfg.solver)
            record["passes"].append({
                "objective_initial": trace.objective[0],
                "objective_final": trace.objective[-1],
                "iterations": trace.iterations,
                "restarts": trace.restarts,
                "grad_norm": trace.grad_norm[-1],
                "converged": trace.converged,
            })
            if not (np.all(np.isfinite(x)) and np.all(x > 0)):
                raise solver.DomainError("solver left the positive-depth region")
            x0 = x
    except (solver.DomainError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("row %d: falling back to the observation (%s)", i, exc)
        record["fallback"] = True
        record["warning"] = str(exc)
        return y_l.copy(), y_r.copy()

    x_l = np.where(mask_l, x, y_l)
    W = warp.interpolation_weights(x, rig, exact)
    g = W @ x
    x_r = np.where(mask_r & (W.sum(axis=1) > 0), g, y_r)
    return x_l, x_r


def enhance_image_pair(left: DepthImage, right: DepthImage, rig: CameraRig,
                       cfg: PipelineConfig):
    """Enhance both views top to bottom; returns ``(left, right, report)``."""
    left.check_rig(rig)
    right.check_rig(rig)
    state = EnhancementState(cfg)
    out_l = np.array(left.values)
    out_r = np.array(right.values)
    rows = []
    for i in range(rig.height):
        x_l, x_r, record = enhance_row_pair(i, left.values[i], right.values[i], state, rig,
                                            left.mask[i], right.mask[i])
        out_l[i], out_r[i] = x_l, x_r
        rows.append(record)
    report = {
        "rows": rows,
        "fallback_rows": [r["row"] for r in rows if r["fallback"]],
        "metric_refreshes": state.refreshes,
    }
    return (DepthImage(out_l, left.mask, left.bit_depth),
            DepthImage(out_r, right.mask, right.bit_depth), report)

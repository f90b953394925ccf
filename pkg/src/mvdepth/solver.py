"""MAP objective for one left row and its Nesterov fast-gradient solver.

The objective in the left row ``x`` is

    -ln(a_l^T (y_l - x) + b_l) - ln(a_r^T (y_r - H x - d) + b_r)
        + lam_l * x^T L_l x + lam_r * (H x + d)^T L_r (H x + d)

Both log arguments must stay positive; the solver keeps every iterate and
every extrapolated point at least ``domain_margin`` times the density at the
expansion point inside that domain.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .noise_model import AffineLikelihood


class DomainError(ValueError):
    """A log argument of the objective is not positive at the requested point."""


class InfeasibleStart(DomainError):
    """The starting point violates the domain margin."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 200
    grad_tol: float = 1e-6
    beta: float = 0.5
    step0: float = 1.0
    domain_margin: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.beta < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not self.domain_margin > 0:
            raise ValueError("domain margin must be positive")
        if not self.step0 > 0:
            raise ValueError("initial step must be positive")


def _dense(L) -> np.ndarray:
    if L is None:
        return None
    if hasattr(L, "L"):
        L = L.L
    return L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)


@dataclass(eq=False)
class RowContext:
    """Every constant of one row's objective.

    ``H`` and ``d`` describe the linearised warp; the affine coefficients are
    stored as given plus an additive ``log_scale`` (see ``noise_model``).
    ``anchor_l``/``anchor_r`` are the (scaled) densities at the expansion
    point; the domain margin is measured against them, falling back to ``b``.
    """

    y_l: np.ndarray
    y_r: np.ndarray
    a_l: np.ndarray
    b_l: float
    a_r: np.ndarray
    b_r: float
    L_l: object
    L_r: object
    H: np.ndarray
    d: np.ndarray
    lambda_l: float = 1.0
    lambda_r: float = 1.0
    log_scale_l: float = 0.0
    log_scale_r: float = 0.0
    anchor_l: float | None = None
    anchor_r: float | None = None
    _quad: np.ndarray = field(init=False, repr=False)
    _Ll: np.ndarray = field(init=False, repr=False)
    _Lr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y_l = np.asarray(self.y_l, dtype=float)
        self.y_r = np.asarray(self.y_r, dtype=float)
        self.a_l = np.asarray(self.a_l, dtype=float)
        self.a_r = np.asarray(self.a_r, dtype=float)
        self.H = np.asarray(self.H, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        n = self.y_l.size
        for name in ("y_r", "a_l", "a_r", "d"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if self.H.shape != (n, n):
            raise ValueError("H must be N x N")
        if self.lambda_l < 0 or self.lambda_r < 0:
            raise ValueError("prior weights must be non-negative")
        Ll, Lr = _dense(self.L_l), _dense(self.L_r)
        # The expanded quadratic is only kept for inspection; evaluation goes
        # through the residual form, which avoids cancellation at large depth.
        quad = self.lambda_l * Ll + self.lambda_r * (self.H.T @ Lr @ self.H)
        self._quad = 0.5 * (quad + quad.T)
        self._Ll = self.lambda_l * Ll
        self._Lr = self.lambda_r * Lr

    @classmethod
    def from_parts(cls, y_l, y_r, al: AffineLikelihood, ar: AffineLikelihood, L_l, L_r,
                   lin, lambda_l=1.0, lambda_r=1.0) -> "RowContext":
        return cls(y_l, y_r, al.a, al.b, ar.a, ar.b, L_l, L_r, lin.H, lin.d,
                   lambda_l, lambda_r, al.log_scale, ar.log_scale,
                   float(al.a @ al.n0) + al.b, float(ar.a @ ar.n0) + ar.b)

    @property
    def n(self) -> int:
        return self.y_l.size

    def log_args(self, x) -> tuple[float, float]:
        x = np.asarray(x, dtype=float)
        arg_l = float(self.a_l @ (self.y_l - x)) + self.b_l
        arg_r = float(self.a_r @ (self.y_r - self.H @ x - self.d)) + self.b_r
        return arg_l, arg_r

    def margins(self, cfg: SolverConfig) -> tuple[float, float]:
        ref_l = self.b_l if self.anchor_l is None else self.anchor_l
        ref_r = self.b_r if self.anchor_r is None else self.anchor_r
        return cfg.domain_margin * abs(ref_l), cfg.domain_margin * abs(ref_r)


def _evaluate(x, ctx: RowContext, want_grad: bool):
    arg_l, arg_r = ctx.log_args(x)
    if not (arg_l > 0 and arg_r > 0):
        raise DomainError(f"log arguments ({arg_l:g}, {arg_r:g}) must be positive")
    r = ctx.H @ x + ctx.d
    Lx = ctx._Ll @ x
    Lr_r = ctx._Lr @ r
    f = (-math.log(arg_l) - ctx.log_scale_l - math.log(arg_r) - ctx.log_scale_r
         + float(x @ Lx) + float(r @ Lr_r))
    if not want_grad:
        return f, None
    g = ctx.a_l / arg_l + ctx.H.T @ (ctx.a_r / arg_r + 2.0 * Lr_r) + 2.0 * Lx
    return f, g


def objective(x, ctx: RowContext) -> float:
    return _evaluate(np.asarray(x, dtype=float), ctx, False)[0]


def gradient(x, ctx: RowContext) -> np.ndarray:
    return _evaluate(np.asarray(x, dtype=float), ctx, True)[1]


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    restarts: int = 0
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.objective) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "grad_norm", "step"])
            for k, (f, g, s) in enumerate(zip(self.objective, self.grad_norm, self.step)):
                w.writerow([k, repr(f), repr(g), repr(s)])


def fgm_solve(x_init, ctx: RowContext, cfg: SolverConfig = SolverConfig()):
    """Nesterov accelerated gradient with backtracking and adaptive restart.

    Returns ``(x_star, trace)``.  Momentum is reset whenever a step would
    raise the objective or the extrapolated point leaves the domain, so the
    iterates are monotone and ``objective(x_star) <= objective(x_init)``.
    """
    x = np.array(x_init, dtype=float)
    m_l, m_r = ctx.margins(cfg)

    def inside(z):
        arg_l, arg_r = ctx.log_args(z)
        return arg_l >= m_l and arg_r >= m_r

    if not inside(x):
        raise InfeasibleStart("initial point violates the log-domain margin; "
                              "re-anchor the affine likelihoods at x_init")
    fx, gx = _evaluate(x, ctx, True)
    trace = SolveTrace([fx], [float(np.linalg.norm(gx))], [0.0])
    y, fy, gy = x, fx, gx
    t = 1.0
    step = cfg.step0
    tiny = 1e-300
    for _ in range(cfg.max_iters):
        if trace.grad_norm[-1] <= cfg.grad_tol:
            break
        g2 = float(gy @ gy)
        slack = 16 * np.finfo(float).eps * (abs(fy) + 1.0)
        gz = None
        while True:
            z = y - step * gy
            if inside(z):
                fz, _ = _evaluate(z, ctx, False)
                if 0.5 * step * g2 > 64 * slack:
                    if fz <= fy - 0.5 * step * g2 + slack:
                        break
                else:
                    # decrease below rounding: check the local Lipschitz bound instead
                    _, gz = _evaluate(z, ctx, True)
                    if float(np.linalg.norm(gz - gy)) <= math.sqrt(g2) and fz <= fy + slack:
                        break
                    gz = None
            step *= cfg.beta
            if step < tiny:
                break
        if step < tiny:
            break
        if gz is None:
            _, gz = _evaluate(z, ctx, True)
        if fz > fx + slack or (fz > fx and float(gz @ (z - x)) > 0):
            # momentum overshoot: restart from the current iterate
            trace.restarts += 1
            if y is x:
                break
            y, fy, gy, t = x, fx, gx, 1.0
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y_next = z + ((t - 1.0) / t_next) * (z - x)
        x, fx, gx = z, fz, gz
        trace.objective.append(fx)
        trace.grad_norm.append(float(np.linalg.norm(gx)))
        trace.step.append(step)
        if inside(y_next):
            y, t = y_next, t_next
            fy, gy = _evaluate(y, ctx, True)
        else:
            trace.restarts += 1
            y, fy, gy, t = x, fx, gx, 1.0
        step /= cfg.beta ** 0.5
    trace.converged = trace.grad_norm[-1] <= cfg.grad_tol
    return x, trace

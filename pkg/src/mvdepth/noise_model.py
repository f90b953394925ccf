"""Row-noise precision, Gaussian density, affine likelihood and cell integral.

The density is the unnormalised ``exp(-n^T P n / sigma_n2)``.  Over one
quantisation cell it is replaced by its tangent plane ``a^T n + b``, whose
integral over the cell centred at ``y - x`` is ``Q^N (a^T (y - x) + b)``.

For long rows the density at the expansion point underflows, so the affine
coefficients carry a separate ``log_scale``: the true coefficients are
``exp(log_scale) * (a, b)``.  ``log_scale`` is 0 whenever the density is
representable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# below this log-density the plain coefficients lose too much precision
_LOG_FLOOR = -600.0


@dataclass(frozen=True, eq=False)
class PrecisionEstimate:
    P: np.ndarray
    sigma_n2: float
    degenerate: bool = False

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("precision must be square")
        if not self.sigma_n2 > 0:
            raise ValueError("sigma_n2 must be positive")
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    @classmethod
    def isotropic(cls, n: int, sigma_n2: float) -> "PrecisionEstimate":
        """Precision of white noise with variance ``sigma_n2``."""
        return cls(np.eye(n) / sigma_n2, sigma_n2)


@dataclass(frozen=True, eq=False)
class AffineLikelihood:
    a: np.ndarray
    b: float
    Q: float
    n0: np.ndarray
    log_scale: float = 0.0

    def value(self, n) -> float:
        """Affine density model at noise vector ``n`` (true scale)."""
        return math.exp(self.log_scale) * (float(self.a @ n) + self.b)


def estimate_precision(residual_rows, sigma_n2: float, reg: float = 1e-3) -> PrecisionEstimate:
    """Inverse of the diagonally loaded sample covariance of recent residual rows.

    With a single row the second moment ``r r^T`` is used, since there is
    nothing to centre against.  Loading is ``reg * trace(cov) / N`` with a
    floor of 1e-9; an all-zero covariance yields ``1e9 * I`` flagged
    degenerate.
    """
    R = np.atleast_2d(np.asarray(residual_rows, dtype=float))
    if R.shape[0] < 1 or R.shape[1] < 1:
        raise ValueError("need at least one residual row")
    k, n = R.shape
    if k == 1:
        cov = np.outer(R[0], R[0])
    else:
        centred = R - R.mean(axis=0)
        cov = centred.T @ centred / (k - 1)
    eps = max(reg * np.trace(cov) / n, 1e-9)
    degenerate = not np.any(cov)
    if degenerate:
        return PrecisionEstimate(np.eye(n) / eps, sigma_n2, degenerate=True)
    P = np.linalg.inv(cov + eps * np.eye(n))
    return PrecisionEstimate(P, sigma_n2)


def log_noise_density(n, est: PrecisionEstimate) -> float:
    n = np.asarray(n, dtype=float)
    return -float(n @ est.P @ n) / est.sigma_n2


def noise_density(n, est: PrecisionEstimate) -> float:
    return math.exp(log_noise_density(n, est))


def affine_approx(y, x0, est: PrecisionEstimate, Q: float, drop=None) -> AffineLikelihood:
    """Tangent plane of the density at ``n0 = y - x0``.

    ``drop`` marks pixels excluded from the likelihood: their residual is
    zeroed and their coefficient removed.
    """
    y = np.asarray(y, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if y.shape != x0.shape:
        raise ValueError("observation and expansion point differ in length")
    n0 = y - x0
    if drop is not None:
        n0 = np.where(drop, 0.0, n0)
    logp = log_noise_density(n0, est)
    log_scale = 0.0 if logp > _LOG_FLOOR else logp
    p = math.exp(logp - log_scale)
    a = -(2.0 / est.sigma_n2) * p * (est.P @ n0)
    if drop is not None:
        a = np.where(drop, 0.0, a)
    b = p - float(a @ n0)
    return AffineLikelihood(a=a, b=b, Q=Q, n0=n0, log_scale=log_scale)


def cell_likelihood(al: AffineLikelihood, y, x) -> float:
    """Closed-form integral of the affine density over the quantisation cell."""
    z = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    arg = float(al.a @ z) + al.b
    if not arg > 0:
        raise ValueError(f"affine likelihood is non-positive ({arg:g}) at this x")
    return al.Q ** z.size * math.exp(al.log_scale) * arg

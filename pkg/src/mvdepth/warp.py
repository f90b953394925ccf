"""Left-to-right row warp ``g(x) = W(x) x`` and its first-order expansion.

Left pixel ``j`` with depth ``x_j`` lands at right column ``j - fD/x_j``;
right pixel ``i`` is a Gaussian-weighted average of the left depths that
land near it.  Weights further than ``truncate * sigma_s`` pixels away are
dropped; inside the window the kernel is shifted down by its value at the
cut so that ``g`` stays continuous.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .scene_io import CameraRig

EXACT = "exact"
CONSTANT_C = "constant-C"


@dataclass(frozen=True)
class WarpConfig:
    sigma_s: float = 1.0
    normalization_mode: str = CONSTANT_C
    C: float = 1.0
    truncate: float = 4.0

    def __post_init__(self):
        if not self.sigma_s > 0:
            raise ValueError("sigma_s must be positive")
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.normalization_mode not in (EXACT, CONSTANT_C):
            raise ValueError(f"unknown normalization mode {self.normalization_mode!r}")
        if self.truncate < 0:
            raise ValueError("truncate must be >= 0 (0 disables truncation)")

    @property
    def exact(self) -> bool:
        return self.normalization_mode == EXACT


@dataclass(frozen=True, eq=False)
class LinearizedWarp:
    """Affine stand-in ``H x + d`` for ``g`` around ``x0``.

    ``C`` holds the per-row normalisers frozen at ``x0``; ``covered`` is
    False for right pixels no left pixel projects near.
    """

    H: np.ndarray
    d: np.ndarray
    x0: np.ndarray
    C: np.ndarray
    covered: np.ndarray

    def __call__(self, x):
        return self.H @ x + self.d


def _row(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D pixel row")
    if not np.all(x > 0):
        raise ValueError("depths must be strictly positive to compute disparity")
    return x


def disparity(x, rig: CameraRig):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("disparity is undefined for non-positive depth")
    return rig.fD / x


def _terms(x, rig, cfg: WarpConfig, C=None, exact=None):
    x = _row(x)
    exact = cfg.exact if exact is None else exact
    if C is None:
        C = np.full(x.shape, cfg.C)
    else:
        C = np.ascontiguousarray(C, dtype=float)
        if C.shape != x.shape:
            raise ValueError("normaliser vector must match the row length")
    return kernels.warp_matrices(x, float(rig.fD), float(cfg.sigma_s),
                                 float(cfg.truncate), C, bool(exact))


def interpolation_weights(x_l, rig: CameraRig, cfg: WarpConfig, C=None) -> np.ndarray:
    """Weight matrix ``W(x_l)``; rows of uncovered right pixels are all zero.

    In constant-C mode ``C`` may be a per-row vector (e.g. frozen from an
    expansion point); otherwise ``cfg.C`` is used for every row.
    """
    W, _, _ = _terms(x_l, rig, cfg, C)
    return W


def uncovered_rows(x_l, rig: CameraRig, cfg: WarpConfig) -> np.ndarray:
    _, _, mass = _terms(x_l, rig, cfg)
    return mass <= 0.0


def frozen_normalizer(x0, rig: CameraRig, cfg: WarpConfig) -> np.ndarray:
    """Per-row constants that make ``W(x0)`` row-stochastic (0 where uncovered)."""
    _, _, mass = _terms(x0, rig, cfg)
    out = np.zeros_like(mass)
    np.divide(1.0, mass, out=out, where=mass > 0)
    return out


def apply_warp(x_l, rig: CameraRig, cfg: WarpConfig, C=None) -> np.ndarray:
    W, _, _ = _terms(x_l, rig, cfg, C)
    return W @ np.asarray(x_l, dtype=float)


def warp_jacobian(x0, rig: CameraRig, cfg: WarpConfig, C=None) -> np.ndarray:
    """Analytic Jacobian of ``g`` at ``x0``.

    Constant-C mode differentiates with the normalisers held fixed; exact
    mode also differentiates the row normalisation.
    """
    _, H, _ = _terms(x0, rig, cfg, C)
    return H


def linearize(x0, rig: CameraRig, cfg: WarpConfig) -> LinearizedWarp:
    x0 = _row(x0)
    W, H, mass = _terms(x0, rig, cfg, exact=True)
    covered = mass > 0.0
    C = frozen_normalizer(x0, rig, cfg)
    if not cfg.exact:
        _, H, _ = _terms(x0, rig, cfg, C, exact=False)
    gx0 = W @ x0
    return LinearizedWarp(H=H, d=gx0 - H @ x0, x0=x0.copy(), C=C, covered=covered)

"""Depth-sensor image formation and synthetic rectified scene pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .scene_io import CameraRig, DepthImage, SceneSpec


@dataclass(frozen=True)
class FormationParams:
    Q: float
    sigma_n2: float
    seed: int = 0

    def __post_init__(self):
        if not self.Q > 0:
            raise ValueError(f"quantisation step must be positive, got {self.Q}")
        if not self.sigma_n2 >= 0:
            raise ValueError(f"noise variance must be non-negative, got {self.sigma_n2}")


def quantization_step_for_bits(depth_range, bits: int) -> float:
    lo, hi = (float(v) for v in depth_range)
    if not hi > lo:
        raise ValueError(f"degenerate depth range ({lo}, {hi})")
    if bits < 1:
        raise ValueError("need at least one bit")
    return (hi - lo) / 2.0 ** bits


def quantize(values, Q: float) -> np.ndarray:
    return np.round(np.asarray(values, dtype=float) / Q) * Q


def simulate_observation(clean: DepthImage, params: FormationParams) -> DepthImage:
    """Add i.i.d. Gaussian noise to every valid pixel, then round to the ``Q`` lattice.

    Pixels whose noisy value falls below zero are masked invalid.
    """
    rng = np.random.default_rng(params.seed)
    noise = rng.normal(0.0, np.sqrt(params.sigma_n2), size=clean.shape)
    noisy = clean.values + noise
    mask = clean.mask & (noisy >= 0)
    values = np.where(mask, quantize(np.maximum(noisy, 0.0), params.Q), 0.0)
    mask &= values > 0
    return DepthImage(values, mask, clean.bit_depth)


# ---------------------------------------------------------------------------
# synthetic surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScene:
    """Depth surface ``z(u, v)`` over continuous left-image coordinates."""

    surface: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rig: CameraRig
    name: str = "custom"


def plane_surface(rig: CameraRig, z0: float, normal=(0.0, 0.0, -1.0)):
    """3-D plane through ``(0, 0, z0)`` with the given normal.

    Inverse depth of a plane is affine in pixel coordinates, which is what
    makes this a true plane in 3-D rather than a depth ramp.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if abs(n[2]) < 1e-12:
        raise ValueError("plane must not contain the optical axis direction")

    def z(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        denom = n[0] * (u - rig.cx) / rig.f + n[1] * (v - rig.cy) / rig.f + n[2]
        with np.errstate(divide="ignore"):
            return n[2] * z0 / denom

    return z


def make_scene(spec: SceneSpec, rig: CameraRig) -> SyntheticScene:
    kind = spec.kind
    if kind == "fronto":
        base = plane_surface(rig, spec.z0)
    elif kind in ("slanted", "slanted_sinusoid"):
        base = plane_surface(rig, spec.z0, spec.normal)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    if kind != "slanted_sinusoid" or spec.amplitude == 0:
        return SyntheticScene(base, rig, kind)
    amp, period = spec.amplitude, spec.period

    def z(u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return base(u, v) + amp * np.sin(2 * np.pi * u / period) * np.cos(2 * np.pi * v / (2 * period))

    return SyntheticScene(z, rig, kind)


def _right_sources(z, fD, cols, v, lo, hi, iters=80):
    """Left coordinates whose surface points land on right columns ``cols``.

    Vectorised bisection on ``u - fD/z(u, v) - col``; the residual is
    monotone in ``u`` whenever the disparity changes by less than one pixel
    per pixel, which holds for every smooth surface this module builds.
    Returns NaN where the bracket holds no sign change.
    """
    h = lambda u: u - fD / z(u, v) - cols  # noqa: E731
    with np.errstate(divide="ignore", invalid="ignore"):
        hlo, hhi = h(lo), h(hi)
        ok = np.isfinite(hlo) & np.isfinite(hhi) & (hlo <= 0) & (hhi >= 0)
        lo, hi = lo.copy(), hi.copy()
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            neg = h(mid) < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
    return np.where(ok, 0.5 * (lo + hi), np.nan)


def render_scene_pair(scene: SyntheticScene) -> tuple[DepthImage, DepthImage]:
    rig = scene.rig
    rows = np.arange(rig.height, dtype=float)
    cols = np.arange(rig.width, dtype=float)
    uu, vv = np.meshgrid(cols, rows)
    with np.errstate(divide="ignore", invalid="ignore"):
        left = scene.surface(uu, vv)
    left_mask = np.isfinite(left) & (left > 0)
    left = np.where(left_mask, left, 0.0)
    if rig.fD == 0:
        return DepthImage(left, left_mask), DepthImage(left.copy(), left_mask.copy())

    right = np.zeros_like(left)
    right_mask = np.zeros_like(left_mask)
    for i, v in enumerate(rows):
        row_z = left[i][left_mask[i]]
        if row_z.size == 0:
            continue
        # bracket wide enough for every disparity the row can produce
        pad = rig.fD / row_z.min() * 2 + 8
        u = _right_sources(scene.surface, rig.fD, cols, v, cols - 1.0, cols + pad)
        with np.errstate(invalid="ignore"):
            zr = scene.surface(np.nan_to_num(u), v)
        good = np.isfinite(u) & np.isfinite(zr) & (zr > 0)
        right[i] = np.where(good, zr, 0.0)
        right_mask[i] = good
    return DepthImage(left, left_mask), DepthImage(right, right_mask)


def scene_depth_range(left: DepthImage, right: DepthImage) -> tuple[float, float]:
    vals = np.concatenate([left.values[left.mask], right.values[right.mask]])
    return float(vals.min()), float(vals.max())

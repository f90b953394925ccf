"""Depth images to point clouds, normal estimation, and C2C / C2P errors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .scene_io import CameraRig, DepthImage, PointCloud

LEFT, RIGHT = "left", "right"


@dataclass(frozen=True, eq=False)
class MetricsReport:
    c2c: float
    c2p: float | None
    distances: np.ndarray | None = None
    plane_distances: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"c2c": self.c2c, "c2p": self.c2p}


def project_to_cloud(img: DepthImage, rig: CameraRig, view: str = LEFT) -> PointCloud:
    img.check_rig(rig)
    v, u = np.nonzero(img.mask)
    z = img.values[v, u]
    pts = np.stack([(u - rig.cx) * z / rig.f, (v - rig.cy) * z / rig.f, z], axis=1)
    if view == RIGHT:
        pts[:, 0] += rig.D
    elif view != LEFT:
        raise ValueError(f"view must be 'left' or 'right', got {view!r}")
    return PointCloud(pts)


def merge_views(left: DepthImage, right: DepthImage, rig: CameraRig) -> PointCloud:
    return PointCloud.concat(project_to_cloud(left, rig, LEFT), project_to_cloud(right, rig, RIGHT))


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """PCA normals over each point's k nearest neighbours (the point included).

    Normals face the left camera centre; degenerate neighbourhoods get
    ``(0, 0, -1)``.
    """
    if k < 3:
        raise ValueError("need k >= 3 neighbours for a plane fit")
    if len(cloud) < k + 1:
        raise ValueError(f"cloud has {len(cloud)} points, need at least k+1 = {k + 1}")
    pts = np.ascontiguousarray(cloud.points)
    _, idx = cKDTree(pts).query(pts, k=k)
    normals, _ = kernels.knn_normals(pts, np.ascontiguousarray(idx, dtype=np.int64))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def nearest(reference: PointCloud, test: PointCloud) -> np.ndarray:
    """Index of each reference point's nearest test point (exact search)."""
    if len(reference) == 0 or len(test) == 0:
        raise ValueError("clouds must be non-empty")
    _, idx = cKDTree(test.points).query(reference.points, k=1)
    return np.asarray(idx, dtype=np.int64)


def point_distances(reference: PointCloud, test: PointCloud, idx) -> np.ndarray:
    diff = reference.points - test.points[idx]
    return np.sqrt(np.sum(diff * diff, axis=1))


def plane_distances(reference: PointCloud, test: PointCloud, idx) -> np.ndarray:
    if test.normals is None:
        raise ValueError("point-to-plane error needs normals on the test cloud")
    diff = reference.points - test.points[idx]
    return np.abs(np.sum(diff * test.normals[idx], axis=1))


def c2c(reference: PointCloud, test: PointCloud) -> float:
    """Mean distance from each reference point to its nearest test point."""
    idx = nearest(reference, test)
    return float(point_distances(reference, test, idx).mean())


def c2p(reference: PointCloud, test: PointCloud) -> float:
    """Mean distance from each reference point to its nearest test point's tangent plane."""
    idx = nearest(reference, test)
    return float(plane_distances(reference, test, idx).mean())


def evaluate(reference: PointCloud, test: PointCloud, keep_distances: bool = False) -> MetricsReport:
    """C2C and, when the test cloud has normals, C2P over one shared correspondence set."""
    idx = nearest(reference, test)
    dist = point_distances(reference, test, idx)
    pdist = plane_distances(reference, test, idx) if test.normals is not None else None
    return MetricsReport(
        c2c=float(dist.mean()),
        c2p=None if pdist is None else float(pdist.mean()),
        distances=dist if keep_distances else None,
        plane_distances=pdist if keep_distances else None,
    )

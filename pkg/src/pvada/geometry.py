"""Spatial kernels: unit-sphere normalization, voxel-grid downsampling and kNN."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ValidationError

__all__ = [
    "PointCloud", "VoxelGrid", "normalize_unit_sphere", "build_voxel_grid",
    "voxel_downsample", "knn", "canonical_order",
]

_KNN_CHUNK = 256


@dataclass
class PointCloud:
    """An ``N x 3`` coordinate set with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype.kind not in "fiu":
            raise ValidationError(f"point coordinates must be numeric, got dtype {pts.dtype}")
        if pts.dtype.kind != "f":
            pts = pts.astype(np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValidationError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        self.points = pts
        if self.label is not None:
            self.label = int(self.label)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide (up to rounding of the centroid) is
    only centered.
    """
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    scale = max(1.0, float(np.abs(pts).max()))
    if radius > 64 * np.finfo(pts.dtype).eps * scale:
        centered = centered / radius
    return cloud.with_points(centered)


@dataclass
class VoxelGrid:
    """Occupied cells of a regular grid anchored at the cloud's coordinate minimum."""

    voxel_size: float
    origin: np.ndarray
    cells: dict = field(default_factory=dict)


def _check_voxel_size(voxel_size: float) -> float:
    v = float(voxel_size)
    if not np.isfinite(v) or v <= 0:
        raise ValidationError(f"voxel size must be positive, got {voxel_size}")
    return v


def _cell_coords(points: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    origin = points.min(axis=0)
    return np.floor((points - origin) / voxel_size).astype(np.int64), origin


def build_voxel_grid(cloud: PointCloud, voxel_size: float) -> VoxelGrid:
    """Map each occupied cell coordinate to the indices of its member points."""
    v = _check_voxel_size(voxel_size)
    coords, origin = _cell_coords(cloud.points, v)
    cells: dict = {}
    for i, c in enumerate(map(tuple, coords.tolist())):
        cells.setdefault(c, []).append(i)
    return VoxelGrid(v, origin, cells)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> tuple[PointCloud, np.ndarray]:
    """Replace the points of every occupied voxel by their centroid.

    Output rows follow lexicographic order of the integer cell coordinates.
    Returns the downsampled cloud and, for each input point, the row of
    its voxel in the output.
    """
    v = _check_voxel_size(voxel_size)
    coords, _ = _cell_coords(cloud.points, v)
    _, assignment = np.unique(coords, axis=0, return_inverse=True)
    assignment = assignment.reshape(-1)
    n_cells = int(assignment.max()) + 1
    counts = np.bincount(assignment, minlength=n_cells).astype(cloud.points.dtype)
    centroids = np.empty((n_cells, 3), dtype=cloud.points.dtype)
    for d in range(3):
        centroids[:, d] = np.bincount(assignment, weights=cloud.points[:, d], minlength=n_cells) / counts
    return cloud.with_points(centroids), assignment


def knn(query: PointCloud | np.ndarray, reference: PointCloud | np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest reference points for every query point.

    Rows are ordered by (squared Euclidean distance, reference index), the
    distance being summed in x, y, z order. When
    the reference has fewer than ``k`` points the nearest index pads the row.
    """
    q = query.points if isinstance(query, PointCloud) else np.asarray(query, dtype=np.float64)
    r = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=np.float64)
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    if r.ndim != 2 or r.shape[0] == 0:
        raise ValidationError("knn needs a non-empty reference set")
    n_ref = r.shape[0]
    take = min(k, n_ref)
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for start in range(0, q.shape[0], _KNN_CHUNK):
        block = q[start:start + _KNN_CHUNK]
        diff = block[:, None, :] - r[None, :, :]
        # fixed x, y, z accumulation order so exact ties stay ties
        dist = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out[start:start + len(block), :take] = _smallest_sorted(dist, take)
    if take < k:
        out[:, take:] = out[:, :1]
    return out


def _smallest_sorted(dist: np.ndarray, k: int) -> np.ndarray:
    n = dist.shape[1]
    if k == n:
        return np.argsort(dist, axis=1, kind="stable")
    part = np.argpartition(dist, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(dist, part, axis=1).max(axis=1, keepdims=True)
    # argpartition picks arbitrarily among values equal to the k-th; redo those rows exactly
    ambiguous = np.flatnonzero((dist <= kth).sum(axis=1) > k)
    if ambiguous.size:
        part[ambiguous] = np.argsort(dist[ambiguous], axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(dist, part, axis=1)
    order = np.lexsort((part, sel), axis=1)
    return np.take_along_axis(part, order, axis=1)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))

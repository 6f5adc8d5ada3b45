"""Multi-scale voxel down-sampling into a window / patch / point hierarchy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyLevel
from .geometry import PointCloud, as_points


def _voxel_keys(points: np.ndarray, voxel_size: float, origin: np.ndarray) -> np.ndarray:
    return np.floor((points - origin) / voxel_size).astype(np.int64)


def voxel_downsample(cloud, voxel_size: float, origin=None) -> PointCloud:
    """One centroid per occupied voxel, ordered by integer voxel key.

    The grid is anchored at the axis-wise minimum of the cloud unless
    ``origin`` is given, which makes the result translation-covariant.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(as_points(cloud))
    pts = pc.points
    if len(pts) == 0:
        raise EmptyCloud("cannot down-sample an empty cloud")
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    keys = _voxel_keys(pts, voxel_size, origin)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = counts.shape[0]
    sums = np.zeros((n_vox, 3))
    for axis in range(3):
        sums[:, axis] = np.bincount(inverse, weights=pts[:, axis], minlength=n_vox)
    centroids = sums / counts[:, None]
    intensity = None
    if pc.intensity is not None:
        intensity = np.bincount(inverse, weights=pc.intensity, minlength=n_vox) / counts
    return PointCloud(centroids, intensity)


def radius_outlier_removal(cloud, radius: float, min_neighbors: int) -> PointCloud:
    """Keep points with at least ``min_neighbors`` other points within ``radius``."""
    if radius <= 0 or min_neighbors < 1:
        raise ValueError("radius must be > 0 and min_neighbors >= 1")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(as_points(cloud))
    if len(pc) == 0:
        raise EmptyCloud("empty input")
    tree = cKDTree(pc.points)
    counts = tree.query_ball_point(pc.points, r=radius, return_length=True) - 1
    keep = np.flatnonzero(counts >= min_neighbors)
    if keep.size == 0:
        raise EmptyCloud("radius outlier removal removed every point")
    return pc.subset(keep)


@dataclass
class Hierarchy:
    """Window / patch / point levels of one cloud.

    ``patch_members[i]`` holds indices into ``points``; ``window_members[w]``
    holds indices into ``patch_centers``. ``point_patch`` and ``patch_window``
    are the inverse maps.
    """

    window_centers: PointCloud
    patch_centers: PointCloud
    points: PointCloud
    patch_members: list
    window_members: list
    point_patch: np.ndarray
    patch_window: np.ndarray
    dropped_points: int = 0

    def stats(self) -> dict:
        return {
            "windows": len(self.window_centers),
            "patches": len(self.patch_centers),
            "points": len(self.points),
            "dropped_points": self.dropped_points,
        }


def _group(labels: np.ndarray, n_groups: int) -> list:
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_groups + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(n_groups)]


def build_hierarchy(
    cloud,
    voxel_point: float = 0.3,
    voxel_patch: float = 2.4,
    voxel_window: float = 9.6,
    gamma: float = 2.0,
) -> Hierarchy:
    """Down-sample at three voxel sizes and group each level into the next.

    A point joins the nearest patch centre if it lies strictly within
    ``gamma`` of it and is dropped otherwise. Each patch joins its nearest
    window centre. Patches left without member points are removed, as are
    windows left without patches.
    """
    if not (0 < voxel_point < voxel_patch < voxel_window):
        raise ValueError("need 0 < voxel_point < voxel_patch < voxel_window")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(as_points(cloud))
    if len(pc) == 0:
        raise EmptyCloud("empty input")

    pts_level = voxel_downsample(pc, voxel_point)
    patch_level = voxel_downsample(pc, voxel_patch)
    win_level = voxel_downsample(pc, voxel_window)

    dist, nearest = cKDTree(patch_level.points).query(pts_level.points, k=1)
    kept = np.flatnonzero(dist < gamma)
    if kept.size == 0:
        raise EmptyLevel("no point lies within gamma of a patch centre")
    dropped = len(pts_level) - kept.size
    points = pts_level.subset(kept)
    nearest = nearest[kept]

    used_patches = np.unique(nearest)
    remap = np.full(len(patch_level), -1, dtype=np.int64)
    remap[used_patches] = np.arange(used_patches.size)
    point_patch = remap[nearest]
    patch_centers = patch_level.subset(used_patches)

    _, win_of_patch = cKDTree(win_level.points).query(patch_centers.points, k=1)
    used_windows = np.unique(win_of_patch)
    wremap = np.full(len(win_level), -1, dtype=np.int64)
    wremap[used_windows] = np.arange(used_windows.size)
    patch_window = wremap[win_of_patch]
    window_centers = win_level.subset(used_windows)

    for name, level in (("window", window_centers), ("patch", patch_centers), ("point", points)):
        if len(level) == 0:
            raise EmptyLevel(f"{name} level is empty")

    return Hierarchy(
        window_centers=window_centers,
        patch_centers=patch_centers,
        points=points,
        patch_members=_group(point_patch, len(patch_centers)),
        window_members=_group(patch_window, len(window_centers)),
        point_patch=point_patch,
        patch_window=patch_window,
        dropped_points=int(dropped),
    )

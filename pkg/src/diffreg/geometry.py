"""Rigid transforms, error metrics and the weighted SVD pose solver."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, EmptyCloud, MalformedFile

# Relative threshold on the second singular value of the cross-covariance.
_RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points in meters, ``(N, 3)`` float64, plus optional intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices)
        inten = None if self.intensity is None else self.intensity[indices]
        return PointCloud(self.points[indices], inten)

    def require_nonempty(self):
        if len(self) == 0:
            raise EmptyCloud("point cloud is empty")
        return self


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or anything array-like and return ``(N, 3)`` float64."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )

    def to_line(self) -> str:
        """12 numbers, row-major rotation then translation."""
        vals = list(self.rotation.reshape(-1)) + list(self.translation)
        return " ".join(repr(float(v)) for v in vals)

    @classmethod
    def from_line(cls, line: str) -> "RigidTransform":
        parts = line.split()
        if len(parts) != 12:
            raise MalformedFile(f"expected 12 numbers, got {len(parts)}")
        vals = np.array([float(p) for p in parts])
        return cls(vals[:9].reshape(3, 3), vals[9:])

    def __repr__(self):
        return f"RigidTransform({self.to_line()})"


@dataclass(frozen=True)
class ErrorMetrics:
    rte_cm: float
    rre_deg: float


def apply_transform(cloud, T: RigidTransform) -> PointCloud:
    if isinstance(cloud, PointCloud):
        return PointCloud(T.apply(cloud.points), cloud.intensity)
    return PointCloud(T.apply(as_points(cloud)))


def compose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Transform applying ``T2`` first, then ``T1``."""
    return RigidTransform(
        T1.rotation @ T2.rotation, T1.rotation @ T2.translation + T1.translation
    )


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def rotation_about_axis(axis: str, angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation from roll/pitch/yaw in radians, applied roll first, then pitch, then yaw."""
    return (
        rotation_about_axis("z", yaw)
        @ rotation_about_axis("y", pitch)
        @ rotation_about_axis("x", roll)
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _kabsch(src_c: np.ndarray, dst_c: np.ndarray, w: np.ndarray):
    """SVD solve on centred, weighted data. Returns (R, singular values)."""
    H = (src_c * w[:, None]).T @ dst_c
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, S


def weighted_svd_fit(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Minimizes ``sum_l w_l * ||R src_l + t - dst_l||^2``. A reflection in the
    SVD solution is corrected by flipping the sign of the direction with the
    smallest singular value, so ``det(R) = +1``.

    Raises:
        DegenerateConfiguration: when the weighted cross-covariance has rank
            below 2 (e.g. collinear support) or the weights sum to zero.
    """
    src = as_points(src)
    dst = as_points(dst)
    if src.shape != dst.shape:
        raise ValueError(f"src {src.shape} and dst {dst.shape} differ")
    if src.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    if weights is None:
        w = np.ones(src.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != src.shape[0] or np.any(w < 0):
            raise ValueError("weights must be nonnegative, one per pair")
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateConfiguration("weights sum to zero")
    w = w / wsum
    mu_s = w @ src
    mu_d = w @ dst
    R, S = _kabsch(src - mu_s, dst - mu_d, w)
    if S[0] <= 0 or S[1] <= _RANK_RTOL * S[0]:
        raise DegenerateConfiguration("cross-covariance rank < 2")
    t = mu_d - R @ mu_s
    return RigidTransform(R, t)


def weighted_svd_fit_batch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray):
    """Vectorised fit over a batch.

    Args:
        src, dst: ``(B, M, 3)``.
        weights: ``(B, M)``; padded entries carry weight 0.

    Returns:
        ``(R (B,3,3), t (B,3), valid (B,))`` where ``valid`` flags fits whose
        cross-covariance has rank >= 2.
    """
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum(axis=1)
    ok = wsum > 0
    wn = w / np.where(ok, wsum, 1.0)[:, None]
    mu_s = np.einsum("bm,bmk->bk", wn, src)
    mu_d = np.einsum("bm,bmk->bk", wn, dst)
    sc = src - mu_s[:, None, :]
    dc = dst - mu_d[:, None, :]
    H = np.einsum("bm,bmi,bmj->bij", wn, sc, dc)
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    D = np.zeros((len(d), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ Ut
    t = mu_d - np.einsum("bij,bj->bi", R, mu_s)
    valid = ok & (S[:, 0] > 0) & (S[:, 1] > _RANK_RTOL * S[:, 0])
    return R, t, valid


def rotation_angle_deg(R_est: np.ndarray, R_true: np.ndarray) -> float:
    """Geodesic angle between two rotations.

    Equal to ``arccos((tr(R_est^T R_true) - 1) / 2)``, evaluated with atan2 so
    angles near zero keep full precision.
    """
    M = R_est.T @ R_true
    cos = (np.trace(M) - 1.0) / 2.0
    sin = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def compute_metrics(estimate: RigidTransform, truth: RigidTransform) -> ErrorMetrics:
    rte = 100.0 * float(np.linalg.norm(estimate.translation - truth.translation))
    return ErrorMetrics(rte_cm=rte, rre_deg=rotation_angle_deg(estimate.rotation, truth.rotation))

"""Pose estimators over point correspondences, plus point-to-point ICP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import (
    AllCandidatesDegenerate,
    DegenerateConfiguration,
    Divergence,
    InsufficientPairs,
)
from .geometry import RigidTransform, as_points, rotation_angle_deg, weighted_svd_fit, weighted_svd_fit_batch
from .matching import CorrespondenceSet

METHODS = ("lgr", "ransac", "svd", "icp")
_DIVERGENCE_STREAK = 5


@dataclass
class EstimatorConfig:
    method: str = "lgr"
    inlier_radius: float = 0.6
    lgr_refine_iters: int = 5
    ransac_iters: int = 5000
    ransac_sample: int = 3
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    # minimal samples drawn inside each patch pair for the robust LGR candidates; 0 disables
    lgr_local_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.inlier_radius <= 0:
            raise ValueError("inlier_radius must be positive")
        for name in ("ransac_iters", "ransac_sample", "icp_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lgr_refine_iters < 0 or self.lgr_local_samples < 0 or self.icp_tol <= 0:
            raise ValueError("lgr_refine_iters and lgr_local_samples must be >= 0, icp_tol > 0")


def correspondence_arrays(pairs: CorrespondenceSet, src_cloud, dst_cloud):
    """Coordinates of both ends of every pair, plus the pair scores as weights."""
    return as_points(src_cloud)[pairs.src], as_points(dst_cloud)[pairs.dst], pairs.scores


def inlier_count(T: RigidTransform, src, dst, radius: float) -> int:
    return int(kernels.count_inliers(T.rotation[None], T.translation[None], src, dst, radius)[0])


def inlier_mask(T: RigidTransform, src, dst, radius: float) -> np.ndarray:
    resid = T.apply(src) - dst
    return np.einsum("ij,ij->i", resid, resid) < radius * radius


def _refine(T: RigidTransform, src, dst, w, radius: float, iters: int):
    """Re-fit on the current inliers, keeping the old transform if the count drops."""
    best = inlier_count(T, src, dst, radius)
    history = [best]
    for _ in range(iters):
        mask = inlier_mask(T, src, dst, radius)
        if mask.sum() < 3:
            break
        try:
            T_new = weighted_svd_fit(src[mask], dst[mask], w[mask])
        except DegenerateConfiguration:
            break
        count = inlier_count(T_new, src, dst, radius)
        if count < best:
            break
        T, best = T_new, count
        history.append(best)
    return T, history


def polish(T: RigidTransform, src, dst, radius: float, iters: int = 3) -> RigidTransform:
    """Unweighted re-fits on the pairs within a tight ``radius`` of the current estimate.

    Removes the bias that near-miss outliers inside the wider scoring radius
    put on the refinement. Stops early if fewer than 3 pairs qualify.
    """
    src = as_points(src)
    dst = as_points(dst)
    for _ in range(iters):
        mask = inlier_mask(T, src, dst, radius)
        if mask.sum() < 3:
            break
        try:
            T = weighted_svd_fit(src[mask], dst[mask])
        except DegenerateConfiguration:
            break
    return T


def _local_candidates(bs, bd, bw, fill, cfg: EstimatorConfig):
    """Extra candidates drawn from minimal samples inside each group.

    ``bs, bd, bw`` are the padded per-group arrays ``(B, W, ...)`` and
    ``fill`` the number of real pairs in each group. Returns ``B`` re-fits
    (each group's best sample by local inlier count, fit on those inliers)
    followed by all ``B * S`` sample fits, group-major.
    """
    B, W = bw.shape
    S = cfg.lgr_local_samples
    rng = np.random.default_rng([cfg.seed, 1])
    pick = (rng.random((B, S, 3)) * fill[:, None, None]).astype(np.int64)
    rows = np.arange(B)[:, None, None]
    R, t, valid = weighted_svd_fit_batch(
        bs[rows, pick].reshape(B * S, 3, 3), bd[rows, pick].reshape(B * S, 3, 3), np.ones((B * S, 3))
    )
    R = R.reshape(B, S, 3, 3)
    t = t.reshape(B, S, 3)
    moved = np.einsum("bsij,bwj->bswi", R, bs) + t[:, :, None, :]
    resid = np.einsum("bswi,bswi->bsw", moved - bd[:, None], moved - bd[:, None])
    real = (np.arange(W)[None, :] < fill[:, None])[:, None, :]
    local_in = (resid < cfg.inlier_radius ** 2) & real
    score = np.where(valid.reshape(B, S), local_in.sum(axis=2), -1)
    best = np.argmax(score, axis=1)
    mask = local_in[np.arange(B), best]
    R1, t1, v1 = weighted_svd_fit_batch(bs, bd, bw * mask)
    return (np.concatenate([R1, R.reshape(B * S, 3, 3)]), np.concatenate([t1, t.reshape(B * S, 3)]),
            np.concatenate([v1, valid]))


def lgr_from_arrays(src, dst, weights=None, groups=None, cfg: EstimatorConfig | None = None,
                    return_info: bool = False):
    """Local-to-global registration on raw correspondence arrays.

    One candidate per group (groups are typically patch pairs) is fit by
    weighted SVD on that group's pairs. Candidates are scored by their inlier
    count over all pairs; the best (lowest index on ties) is then refined on
    its inliers.
    """
    cfg = cfg or EstimatorConfig()
    src = as_points(src)
    dst = as_points(dst)
    m = src.shape[0]
    if m < 3:
        raise InsufficientPairs(f"LGR needs >= 3 pairs, got {m}", stage="estimation")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    groups = np.zeros(m, dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)

    labels, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    usable = np.flatnonzero(counts >= 3)
    if usable.size == 0:
        raise AllCandidatesDegenerate("no group has 3 or more pairs", stage="estimation")
    width = int(counts[usable].max())
    B = usable.size
    bs = np.zeros((B, width, 3))
    bd = np.zeros((B, width, 3))
    bw = np.zeros((B, width))
    slot = np.full(labels.size, -1)
    slot[usable] = np.arange(B)
    fill = np.zeros(B, dtype=np.int64)
    for idx in range(m):
        b = slot[inverse[idx]]
        if b < 0:
            continue
        k = fill[b]
        bs[b, k], bd[b, k], bw[b, k] = src[idx], dst[idx], w[idx]
        fill[b] += 1
    R, t, valid = weighted_svd_fit_batch(bs, bd, bw)
    owner = np.arange(B)
    if cfg.lgr_local_samples > 0:
        R2, t2, valid2 = _local_candidates(bs, bd, bw, fill, cfg)
        R, t, valid = np.concatenate([R, R2]), np.concatenate([t, t2]), np.concatenate([valid, valid2])
        owner = np.concatenate([owner, owner, np.repeat(owner, cfg.lgr_local_samples)])
    if not valid.any():
        raise AllCandidatesDegenerate("every candidate fit was degenerate", stage="estimation")
    counts_in = kernels.count_inliers(R[valid], t[valid], src, dst, cfg.inlier_radius)
    best_local = int(np.argmax(counts_in))  # argmax returns the first maximum
    cand = np.flatnonzero(valid)[best_local]
    T0 = RigidTransform(R[cand], t[cand])
    T, history = _refine(T0, src, dst, w, cfg.inlier_radius, cfg.lgr_refine_iters)
    if return_info:
        return T, {"candidates": int(valid.sum()), "best_group": int(labels[usable[owner[cand]]]),
                   "inlier_history": history}
    return T


def estimate_lgr(point_pairs: CorrespondenceSet, patch_pairs: CorrespondenceSet | None,
                 src_cloud, dst_cloud, cfg: EstimatorConfig | None = None, return_info=False):
    """LGR with point pairs grouped by the patch pair that produced them."""
    src, dst, w = correspondence_arrays(point_pairs, src_cloud, dst_cloud)
    groups = point_pairs.group if patch_pairs is not None else None
    return lgr_from_arrays(src, dst, w, groups, cfg, return_info)


def ransac_from_arrays(src, dst, cfg: EstimatorConfig | None = None, return_info=False):
    """Hypothesize-and-verify with minimal samples, seeded by ``cfg.seed``.

    Samples are drawn with replacement; samples with repeated or collinear
    points fail the rank test and are skipped. The best hypothesis (lowest
    index on ties) is re-fit on its inliers.
    """
    cfg = cfg or EstimatorConfig()
    src = as_points(src)
    dst = as_points(dst)
    m = src.shape[0]
    k = cfg.ransac_sample
    if m < max(3, k):
        raise InsufficientPairs(f"RANSAC needs >= {max(3, k)} pairs, got {m}", stage="estimation")
    rng = np.random.default_rng(cfg.seed)
    idx = rng.integers(0, m, size=(cfg.ransac_iters, k))
    R, t, valid = weighted_svd_fit_batch(src[idx], dst[idx], np.ones(idx.shape))
    if not valid.any():
        raise AllCandidatesDegenerate("every RANSAC sample was degenerate", stage="estimation")
    counts = kernels.count_inliers(R[valid], t[valid], src, dst, cfg.inlier_radius)
    best = np.flatnonzero(valid)[int(np.argmax(counts))]
    T = RigidTransform(R[best], t[best])
    T, history = _refine(T, src, dst, np.ones(m), cfg.inlier_radius, max(1, cfg.lgr_refine_iters))
    if return_info:
        return T, {"valid_samples": int(valid.sum()), "inlier_history": history}
    return T


def estimate_ransac(point_pairs: CorrespondenceSet, src_cloud, dst_cloud,
                    cfg: EstimatorConfig | None = None, return_info=False):
    src, dst, _ = correspondence_arrays(point_pairs, src_cloud, dst_cloud)
    return ransac_from_arrays(src, dst, cfg, return_info)


def estimate_svd(point_pairs: CorrespondenceSet, src_cloud, dst_cloud) -> RigidTransform:
    """Score-weighted SVD on every pair."""
    src, dst, w = correspondence_arrays(point_pairs, src_cloud, dst_cloud)
    if src.shape[0] < 3:
        raise InsufficientPairs(f"SVD needs >= 3 pairs, got {src.shape[0]}", stage="estimation")
    return weighted_svd_fit(src, dst, w)


def estimate_icp(src_cloud, dst_cloud, initial: RigidTransform | None = None,
                 cfg: EstimatorConfig | None = None, return_info=False):
    """Point-to-point ICP.

    Each iteration pairs every source point with its nearest target point and
    solves for the full transform from the original source. Stops when the
    change in rotation (radians) plus translation (meters) is below
    ``cfg.icp_tol``.

    Raises:
        Divergence: if the mean residual grows for 5 consecutive iterations.
    """
    cfg = cfg or EstimatorConfig(method="icp")
    src = as_points(src_cloud)
    dst = as_points(dst_cloud)
    if src.shape[0] < 3 or dst.shape[0] < 3:
        raise InsufficientPairs("ICP needs at least 3 points per cloud", stage="estimation")
    tree = cKDTree(dst)
    T = initial or RigidTransform.identity()
    prev_resid = np.inf
    streak = 0
    converged = False
    it = 0
    for it in range(1, cfg.icp_max_iters + 1):
        dist, nn = tree.query(T.apply(src), k=1)
        resid = float(dist.mean())
        streak = streak + 1 if resid > prev_resid else 0
        if streak >= _DIVERGENCE_STREAK:
            raise Divergence(f"mean residual grew {streak} iterations in a row", stage="estimation")
        prev_resid = resid
        T_new = weighted_svd_fit(src, dst[nn])
        delta = np.radians(rotation_angle_deg(T_new.rotation, T.rotation)) + float(
            np.linalg.norm(T_new.translation - T.translation)
        )
        T = T_new
        if delta < cfg.icp_tol:
            converged = True
            break
    if return_info:
        return T, {"iterations": it, "converged": converged, "mean_residual": prev_resid}
    return T

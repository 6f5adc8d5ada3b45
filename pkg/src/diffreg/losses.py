"""Training objectives: patch-level circle loss, point-level NLL and their weighted sum.

Nothing here is optimized; the losses exist so the objective can be
evaluated and its scalar-weight gradients checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NoPositivePairs, ShapeMismatch, ZeroProbability

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    varpi: float = 0.0
    varrho: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.varpi) and np.isfinite(self.varrho)):
            raise ValueError("loss weights must be finite")


@dataclass
class CircleLossConfig:
    pos_margin: float = 0.1
    neg_margin: float = 1.4
    scale: float = 10.0
    pos_overlap: float = 0.1


def feature_distances(f_u, f_v) -> np.ndarray:
    f_u = np.asarray(f_u, dtype=np.float64)
    f_v = np.asarray(f_v, dtype=np.float64)
    diff = f_u[:, None, :] - f_v[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def circle_loss_patch(distances, overlaps, cfg: CircleLossConfig | None = None) -> float:
    """Overlap-aware circle loss averaged over anchor rows.

    For each row with at least one positive (overlap above ``pos_overlap``):
    ``log(1 + sum_pos exp(lam * s * (d - pos_margin)) * sum_neg exp(s * (neg_margin - d)))``
    with ``lam`` the pair's overlap ratio. Negatives are pairs with zero
    overlap; pairs in between are ignored.
    """
    cfg = cfg or CircleLossConfig()
    d = np.asarray(distances, dtype=np.float64)
    ov = np.asarray(overlaps, dtype=np.float64)
    if d.shape != ov.shape or d.ndim != 2:
        raise ShapeMismatch("distances and overlaps must be matching 2-D arrays")
    if np.any(ov < 0) or np.any(ov > 1):
        raise ValueError("overlap ratios must lie in [0, 1]")
    pos = ov > cfg.pos_overlap
    neg = ov == 0
    anchors = np.flatnonzero(pos.any(axis=1))
    if anchors.size == 0:
        raise NoPositivePairs("no pair exceeds the positive overlap threshold")
    pos_logit = np.where(pos, ov * cfg.scale * (d - cfg.pos_margin), -np.inf)
    neg_logit = np.where(neg, cfg.scale * (cfg.neg_margin - d), -np.inf)
    lse_pos = logsumexp(pos_logit[anchors], axis=1)
    with np.errstate(divide="ignore"):
        lse_neg = logsumexp(neg_logit[anchors], axis=1)
    per_anchor = np.logaddexp(0.0, lse_pos + lse_neg)
    return float(per_anchor.mean())


def nll_point_loss(assignment, gt_pairs, unmatched_src=(), unmatched_dst=(),
                   strict: bool = True, stats: dict | None = None) -> float:
    """Mean negative log-probability of the ground-truth assignment.

    ``assignment`` is a Sinkhorn output; when it carries a slack row and
    column (shape ``(n+1, m+1)``), ``unmatched_src`` rows are scored against
    the slack column and ``unmatched_dst`` columns against the slack row.

    Raises:
        ZeroProbability: if a required entry is 0 and ``strict`` is set.
            Otherwise the entry is clamped to ``PROB_FLOOR`` and
            ``stats["clamped"]`` counts it.
    """
    P = np.asarray(assignment, dtype=np.float64)
    gt = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    picked = [P[gt[:, 0], gt[:, 1]]]
    if len(unmatched_src) or len(unmatched_dst):
        picked.append(P[np.asarray(unmatched_src, dtype=np.int64), -1])
        picked.append(P[-1, np.asarray(unmatched_dst, dtype=np.int64)])
    probs = np.concatenate(picked)
    if probs.size == 0:
        raise ValueError("no ground-truth entries given")
    if np.any(probs > 1.0 + 1e-12) or np.any(probs < 0):
        raise ValueError("assignment entries must lie in [0, 1]")
    zero = probs <= 0
    if zero.any():
        if strict:
            raise ZeroProbability(f"{int(zero.sum())} ground-truth entries have probability 0")
        if stats is not None:
            stats["clamped"] = stats.get("clamped", 0) + int(zero.sum())
    return float(-np.mean(np.log(np.maximum(probs, PROB_FLOOR))))


def total_loss(l_patch: float, l_point: float, w: LossWeights):
    """``exp(-varpi) l_patch + varpi + exp(-varrho) l_point + varrho`` and its gradient.

    Returns ``(value, (d/d varpi, d/d varrho))``.
    """
    ep = np.exp(-w.varpi)
    er = np.exp(-w.varrho)
    value = ep * l_patch + w.varpi + er * l_point + w.varrho
    return float(value), (float(1.0 - ep * l_patch), float(1.0 - er * l_point))

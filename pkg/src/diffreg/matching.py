"""Window, patch and point correspondence search."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import NoCorrespondence, NumericalUnderflow, ShapeMismatch
from .sampling import Hierarchy

LEVELS = ("window", "patch", "point")


@dataclass
class CorrelationMatrix:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch("correlation matrix must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("correlation entries must be finite and nonnegative")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class CorrespondenceSet:
    """Index pairs at one level, with scores and the selection threshold.

    ``group`` optionally records, per pair, which coarser-level pair produced it.
    """

    level: str
    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray
    threshold: float = 0.0
    group: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (self.src.shape == self.dst.shape == self.scores.shape):
            raise ShapeMismatch("src, dst and scores must have equal length")
        if self.group is not None:
            self.group = np.asarray(self.group, dtype=np.int64).reshape(-1)
            if self.group.shape != self.src.shape:
                raise ShapeMismatch("group must align with the pairs")

    def __len__(self):
        return self.src.shape[0]

    def pairs(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.scores.tolist()))

    @classmethod
    def empty(cls, level: str) -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(level, z, z, np.zeros(0), 0.0, z.copy())


def dual_normalized_correlation(f_u, f_v) -> CorrelationMatrix:
    """``w_ij = exp(-2 d_ij^2) / (sum_j exp(-d_ij^2) * sum_i exp(-d_ij^2))``.

    Evaluated in log space so large feature distances do not underflow the
    row and column sums.
    """
    f_u = np.atleast_2d(np.asarray(f_u, dtype=np.float64))
    f_v = np.atleast_2d(np.asarray(f_v, dtype=np.float64))
    if f_u.shape[1] != f_v.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {f_u.shape[1]} vs {f_v.shape[1]}")
    d2 = (
        np.einsum("ij,ij->i", f_u, f_u)[:, None]
        + np.einsum("ij,ij->i", f_v, f_v)[None, :]
        - 2.0 * f_u @ f_v.T
    )
    d2 = np.maximum(d2, 0.0)
    log_w = -2.0 * d2 - logsumexp(-d2, axis=1, keepdims=True) - logsumexp(-d2, axis=0, keepdims=True)
    return CorrelationMatrix(np.exp(log_w))


def topk_select(W, n_pairs: int, level: str = "patch", mask=None) -> CorrespondenceSet:
    """The ``n_pairs`` largest entries, ties going to the smaller ``(i, j)``.

    ``mask`` (boolean, same shape) restricts the candidates. Output pairs are
    in selection order (descending score).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    values = W.values if isinstance(W, CorrelationMatrix) else np.asarray(W, dtype=np.float64)
    n_rows, n_cols = values.shape
    flat = values.reshape(-1)
    cand = np.arange(flat.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    if cand.size == 0:
        return CorrespondenceSet.empty(level)
    # cand is increasing, i.e. already in (i, j) order, so a stable sort keeps ties lexicographic
    order = np.argsort(-flat[cand], kind="stable")[: min(n_pairs, cand.size)]
    chosen = cand[order]
    scores = flat[chosen]
    return CorrespondenceSet(level, chosen // n_cols, chosen % n_cols, scores, float(scores[-1]))


def sinkhorn(scores, iterations: int = 100, with_dustbin: bool = False, slack: float = 0.5,
             return_log: bool = False):
    """Log-domain Sinkhorn normalization of a score (logit) matrix.

    Without a dustbin, every row and column gets unit mass, so a square input
    converges to a doubly stochastic matrix. With a dustbin, one slack row and
    column with constant score ``slack`` are appended; real rows and columns
    keep unit mass while the slack row and column carry ``m`` and ``n``. The
    returned matrix includes the slack row and column in that case.

    Raises:
        NumericalUnderflow: if a row or column is entirely ``-inf``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.size == 0:
        raise ShapeMismatch("scores must be a non-empty 2-D array")
    if np.any(np.isnan(S)) or np.any(S == np.inf):
        raise ValueError("scores must be finite or -inf")
    n, m = S.shape
    if with_dustbin:
        Z = np.full((n + 1, m + 1), float(slack))
        Z[:n, :m] = S
        log_mu = np.concatenate([np.zeros(n), [np.log(m)]])
        log_nu = np.concatenate([np.zeros(m), [np.log(n)]])
    else:
        Z = S.copy()
        log_mu = np.zeros(n)
        log_nu = np.zeros(m)
    if np.any(np.all(np.isneginf(Z), axis=1)) or np.any(np.all(np.isneginf(Z), axis=0)):
        raise NumericalUnderflow("a row or column of the score matrix is entirely -inf")
    log_p = kernels.log_sinkhorn(np.ascontiguousarray(Z), log_mu, log_nu, int(iterations))
    return log_p if return_log else np.exp(log_p)


def mutual_topk(P: np.ndarray, k: int):
    """Pairs ``(i, j)`` where ``j`` is in row ``i``'s top-k and ``i`` in column ``j``'s top-k."""
    n, m = P.shape
    kr, kc = min(k, m), min(k, n)
    row_top = np.argsort(-P, axis=1, kind="stable")[:, :kr]
    col_top = np.argsort(-P, axis=0, kind="stable")[:kc, :]
    in_row = np.zeros((n, m), dtype=bool)
    in_row[np.arange(n)[:, None], row_top] = True
    in_col = np.zeros((n, m), dtype=bool)
    in_col[col_top, np.arange(m)[None, :]] = True
    return np.nonzero(in_row & in_col)


@dataclass
class MatchConfig:
    window_topk: int = 16
    n_patch_pairs: int = 128
    point_topk: int = 3
    sinkhorn_iters: int = 100
    dustbin: bool = True
    slack: float = 0.5
    temperature: float = 0.05
    # point pairs need at least this cosine similarity between their features
    min_similarity: float = 0.5
    min_pairs: int = 3
    use_windows: bool = True


def _unit_rows(f):
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(norm > 0, norm, 1.0)


def match_points_in_patches(patch_pairs: CorrespondenceSet, hierarchy_u: Hierarchy,
                            hierarchy_v: Hierarchy, f_u_points, f_v_points,
                            config: MatchConfig | None = None, stats: dict | None = None):
    """Point pairs inside each selected patch pair, pooled over all patch pairs.

    Scores are Sinkhorn probabilities of cosine similarities. A pair found
    from several patch pairs keeps its highest score; the result is sorted
    by ``(i, j)``.
    """
    cfg = config or MatchConfig()
    f_u = _unit_rows(np.asarray(f_u_points, dtype=np.float64))
    f_v = _unit_rows(np.asarray(f_v_points, dtype=np.float64))
    src, dst, sc, grp = [], [], [], []
    skipped = 0
    for g, (a, b) in enumerate(zip(patch_pairs.src.tolist(), patch_pairs.dst.tolist())):
        mu = hierarchy_u.patch_members[a]
        mv = hierarchy_v.patch_members[b]
        if mu.size == 0 or mv.size == 0:
            skipped += 1
            continue
        cos = f_u[mu] @ f_v[mv].T
        P = sinkhorn(cos / cfg.temperature, cfg.sinkhorn_iters, cfg.dustbin,
                     cfg.slack / cfg.temperature)
        P = P[: mu.size, : mv.size]
        ii, jj = mutual_topk(P, cfg.point_topk)
        keep = cos[ii, jj] >= cfg.min_similarity
        ii, jj = ii[keep], jj[keep]
        src.append(mu[ii])
        dst.append(mv[jj])
        sc.append(P[ii, jj])
        grp.append(np.full(ii.size, g, dtype=np.int64))
    if stats is not None:
        stats["empty_patches_skipped"] = stats.get("empty_patches_skipped", 0) + skipped
    if not src:
        return CorrespondenceSet.empty("point")
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    sc = np.concatenate(sc)
    grp = np.concatenate(grp)
    if src.size == 0:
        return CorrespondenceSet.empty("point")
    # dedupe: highest score first, then keep the first of each (i, j)
    order = np.lexsort((-sc, dst, src))
    src, dst, sc, grp = src[order], dst[order], sc[order], grp[order]
    first = np.ones(src.size, dtype=bool)
    first[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
    src, dst, sc, grp = src[first], dst[first], sc[first], grp[first]
    return CorrespondenceSet("point", src, dst, sc, float(sc.min()), grp)


@dataclass
class MatchResult:
    windows: CorrespondenceSet
    patches: CorrespondenceSet
    points: CorrespondenceSet


def hierarchical_match(hierarchy_u: Hierarchy, hierarchy_v: Hierarchy,
                       window_u, window_v, patch_u, patch_v, point_u, point_v,
                       config: MatchConfig | None = None, stats: dict | None = None) -> MatchResult:
    """Window pairs gate patch pairs, patch pairs gate point pairs.

    A patch pair is a candidate only when its two windows form one of the
    selected window pairs. With ``config.use_windows`` off, every patch pair
    is a candidate.

    Raises:
        NoCorrespondence: if any level ends up empty, or fewer than
            ``config.min_pairs`` point pairs survive.
    """
    cfg = config or MatchConfig()
    if cfg.use_windows:
        windows = topk_select(dual_normalized_correlation(_unit_rows(window_u), _unit_rows(window_v)),
                              cfg.window_topk, "window")
        if len(windows) == 0:
            raise NoCorrespondence("no window pairs", stage="matching")
        allowed = np.zeros((len(hierarchy_u.window_centers), len(hierarchy_v.window_centers)), dtype=bool)
        allowed[windows.src, windows.dst] = True
        mask = allowed[hierarchy_u.patch_window[:, None], hierarchy_v.patch_window[None, :]]
    else:
        windows = CorrespondenceSet.empty("window")
        mask = None

    W = dual_normalized_correlation(_unit_rows(patch_u), _unit_rows(patch_v))
    patches = topk_select(W, cfg.n_patch_pairs, "patch", mask=mask)
    if len(patches) == 0:
        raise NoCorrespondence("no patch pairs", stage="matching")
    points = match_points_in_patches(patches, hierarchy_u, hierarchy_v, point_u, point_v, cfg, stats)
    if len(points) < cfg.min_pairs:
        raise NoCorrespondence(f"only {len(points)} point pairs survived matching", stage="matching")
    return MatchResult(windows, patches, points)

"""NumPy reference implementations of the hot kernels.

These are the fallback when the compiled ``_ckernels`` extension is not
available, and the oracle the compiled versions are tested against.
"""
import numpy as np

_INLIER_CHUNK = 1 << 20


def edge_max(node_term, nbr_term, nbr_idx, slope):
    """``out[i] = max_j act(node_term[i] + nbr_term[nbr_idx[i, j]])``.

    ``act`` is a leaky ReLU with negative slope ``slope`` (``slope=1`` is the
    identity). Since ``act`` and rounded addition are monotone, the max can be
    taken before the activation without changing a single bit.
    """
    node_term = np.asarray(node_term, dtype=np.float64)
    nbr_term = np.asarray(nbr_term, dtype=np.float64)
    nbr_idx = np.asarray(nbr_idx, dtype=np.int64)
    if nbr_idx.shape[1] == 0:
        raise ValueError("every node needs at least one neighbor")
    pre = node_term + nbr_term[nbr_idx].max(axis=1)
    if slope == 1.0:
        return pre
    return np.where(pre > 0, pre, slope * pre)


def count_inliers(R, t, src, dst, radius):
    """Number of pairs with ``||R_h src + t_h - dst|| < radius`` per hypothesis."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n_hyp = R.shape[0]
    m = src.shape[0]
    r2 = radius * radius
    counts = np.zeros(n_hyp, dtype=np.int64)
    step = max(1, _INLIER_CHUNK // max(m, 1))
    for lo in range(0, n_hyp, step):
        hi = min(n_hyp, lo + step)
        moved = np.einsum("hij,mj->hmi", R[lo:hi], src) + t[lo:hi, None, :]
        d2 = ((moved - dst[None]) ** 2).sum(axis=2)
        counts[lo:hi] = (d2 < r2).sum(axis=1)
    return counts


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_sinkhorn(log_scores, log_mu, log_nu, iterations):
    """Log-domain Sinkhorn with row marginals ``mu`` and column marginals ``nu``.

    Each iteration normalizes rows then columns. Returns the log of the
    transport plan.
    """
    Z = np.asarray(log_scores, dtype=np.float64)
    log_mu = np.asarray(log_mu, dtype=np.float64)
    log_nu = np.asarray(log_nu, dtype=np.float64)
    u = np.zeros(Z.shape[0])
    v = np.zeros(Z.shape[1])
    for _ in range(iterations):
        u = log_mu - _lse(Z + v[None, :], axis=1)
        v = log_nu - _lse(Z + u[:, None], axis=0)
    return Z + u[:, None] + v[None, :]


def neighbor_attention(z, nbr_idx):
    """``out[i] = sum_j a_ij (z[idx[i, j]] - z[i])`` with ``a_i = softmax_j(-||z_j - z_i||^2 / sqrt(D))``."""
    z = np.asarray(z, dtype=np.float64)
    nbr_idx = np.asarray(nbr_idx, dtype=np.int64)
    diff = z[nbr_idx] - z[:, None, :]
    logits = -np.einsum("nkd,nkd->nk", diff, diff) / np.sqrt(z.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkd->nd", w, diff)

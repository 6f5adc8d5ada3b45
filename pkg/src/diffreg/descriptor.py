"""Rotation-invariant geometric descriptors and sinusoidal position encodings.

The geometric encoder stands in for a learned convolutional backbone. Every
raw component is a function of neighbor offsets and distances only, so the
descriptor is unchanged when the whole cloud is moved rigidly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeMismatch, TooSparse
from .geometry import as_points
from .params import named_rng

N_HIST_BINS = 8
MIN_NEIGHBORS = 4
# linearity, planarity, sphericity, density, 8 histogram bins, curvature
RAW_PER_SCALE = 4 + N_HIST_BINS + 1
SCALES = (1.0, 2.0)


@dataclass
class PairedState:
    """Feature block ``H`` and positional block ``I`` of equal shape ``(N, d)``."""

    features: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape != self.positions.shape:
            raise ShapeMismatch(
                f"features {self.features.shape} and positions {self.positions.shape} must match"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.features, self.positions], axis=1)

    @classmethod
    def from_stacked(cls, z: np.ndarray) -> "PairedState":
        d = z.shape[1] // 2
        return cls(z[:, :d].copy(), z[:, d:].copy())

    def copy(self) -> "PairedState":
        return PairedState(self.features.copy(), self.positions.copy())


def _scale_features(centers, tree, support, radius):
    n = centers.shape[0]
    pairs = cKDTree(centers).sparse_distance_matrix(tree, radius, output_type="ndarray")
    owner = pairs["i"].astype(np.int64)
    order = np.argsort(owner, kind="stable")
    owner = owner[order]
    flat = pairs["j"].astype(np.int64)[order]
    counts = np.bincount(owner, minlength=n)
    offsets = support[flat] - centers[owner]
    dist = np.linalg.norm(offsets, axis=1)
    # the centre itself shows up (at distance 0) when it belongs to the support cloud
    not_self = dist > 0.0
    n_other = np.bincount(owner[not_self], minlength=n)

    safe = np.maximum(counts, 1)
    mean = np.zeros((n, 3))
    for a in range(3):
        mean[:, a] = np.bincount(owner, weights=offsets[:, a], minlength=n) / safe
    second = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(owner, weights=offsets[:, a] * offsets[:, b], minlength=n) / safe
            second[:, a, b] = s
            second[:, b, a] = s
    cov = second - mean[:, :, None] * mean[:, None, :]
    ev = np.linalg.eigvalsh(cov)[:, ::-1]
    ev = np.clip(ev, 0.0, None)
    l1 = np.maximum(ev[:, 0], 1e-300)

    feats = np.zeros((n, RAW_PER_SCALE))
    feats[:, 0] = (ev[:, 0] - ev[:, 1]) / l1
    feats[:, 1] = (ev[:, 1] - ev[:, 2]) / l1
    feats[:, 2] = ev[:, 2] / l1
    feats[:, 3] = np.log1p(n_other) / np.log1p(64.0)

    rel = dist[not_self] / radius
    bins = np.minimum((rel * N_HIST_BINS).astype(np.int64), N_HIST_BINS - 1)
    hist = np.zeros((n, N_HIST_BINS))
    np.add.at(hist, (owner[not_self], bins), 1.0)
    hist /= np.maximum(n_other, 1)[:, None]
    feats[:, 4:4 + N_HIST_BINS] = hist
    feats[:, 4 + N_HIST_BINS] = 3.0 * ev[:, 2] / np.maximum(ev.sum(axis=1), 1e-300)

    sparse = n_other < MIN_NEIGHBORS
    feats[sparse] = 0.0
    return feats, sparse


def raw_geometric_features(centers, support, radius: float):
    """Raw invariant components at every scale in ``SCALES``.

    Returns ``(raw, sparse)``: ``raw`` is ``(N, RAW_PER_SCALE * len(SCALES))``,
    ``sparse`` flags rows whose base-radius neighborhood has fewer than
    ``MIN_NEIGHBORS`` other points. Blocks for such rows are zero.
    """
    centers = as_points(centers)
    support = as_points(support)
    tree = cKDTree(support)
    blocks = []
    base_sparse = None
    for s in SCALES:
        feats, sparse = _scale_features(centers, tree, support, radius * s)
        blocks.append(feats)
        if base_sparse is None:
            base_sparse = sparse
    return np.concatenate(blocks, axis=1), base_sparse


def projection_matrix(raw_dim: int, dim: int, seed: int) -> np.ndarray:
    """Seeded ``(raw_dim, dim)`` map with orthonormal rows (or columns if dim < raw_dim)."""
    rng = named_rng(seed, "descriptor.projection")
    g = rng.normal(size=(max(raw_dim, dim), min(raw_dim, dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T if raw_dim <= dim else q


def encode_at(centers, support, neighborhood_radius: float, dim: int, seed: int,
              gain: float = 1.0, return_flags: bool = False):
    """Descriptors of ``centers`` computed from neighborhoods in ``support``."""
    if dim < 16:
        raise ValueError("dim must be >= 16")
    raw, sparse = raw_geometric_features(centers, support, neighborhood_radius)
    if sparse.all():
        raise TooSparse(f"every point has fewer than {MIN_NEIGHBORS} neighbors within the radius")
    out = gain * (raw @ projection_matrix(raw.shape[1], dim, seed))
    if return_flags:
        return out, sparse
    return out


def encode_geometric(cloud, neighborhood_radius: float, dim: int, seed: int,
                     gain: float = 1.0, return_flags: bool = False):
    """Per-point invariant descriptor projected to ``dim`` dimensions.

    Points with fewer than four neighbors inside the radius get a zero row and
    are flagged in the optional boolean mask. ``TooSparse`` is raised only
    when every point is in that state.
    """
    pts = as_points(cloud)
    if pts.shape[0] < 10:
        raise ValueError("encode_geometric needs at least 10 points")
    return encode_at(pts, pts, neighborhood_radius, dim, seed, gain, return_flags)


def position_frequencies(dim: int, min_wavelength: float = 8.0) -> np.ndarray:
    """Angular frequencies, one octave apart, highest first."""
    n_oct = dim // 6
    wavelengths = min_wavelength * 2.0 ** np.arange(n_oct)
    return 2.0 * np.pi / wavelengths


def encode_positions(cloud, dim: int, alpha: float, min_wavelength: float = 8.0) -> np.ndarray:
    """Sinusoidal encoding of x, y, z scaled by ``alpha``.

    Layout per axis: ``[sin(w_0 x), cos(w_0 x), sin(w_1 x), ...]``; columns
    beyond ``6 * (dim // 6)`` are zero.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pts = as_points(cloud)
    omega = position_frequencies(dim, min_wavelength)
    n_oct = omega.shape[0]
    out = np.zeros((pts.shape[0], dim))
    for axis in range(3):
        phase = pts[:, axis:axis + 1] * omega[None, :]
        block = np.empty((pts.shape[0], 2 * n_oct))
        block[:, 0::2] = np.sin(phase)
        block[:, 1::2] = np.cos(phase)
        out[:, axis * 2 * n_oct:(axis + 1) * 2 * n_oct] = block
    return alpha * out

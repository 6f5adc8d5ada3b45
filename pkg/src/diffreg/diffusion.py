"""Graph diffusion over paired feature/position states.

The right-hand side is a two-layer EdgeConv network on a k-NN graph whose
edges come from the positional block, plus an attention-weighted diffusion
term ``kappa * sum_j a_ij (z_j - z_i)`` with diffusivity ``kappa``. ``diffuse`` integrates it with an
adaptive Runge-Kutta pair and rebuilds the graph from the current positional
block at every accepted step. ``explicit_step`` is the forward-Euler
attention scheme ``Z <- Q Z`` with a row-stochastic ``Q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .descriptor import PairedState
from .errors import ShapeMismatch, StabilityViolation
from .ode import SolveStats, integrate
from .params import ModelParams, uniform_init

LEAKY_SLOPE = 0.2
_KNN_ROW_CHUNK = 512
_KNN_EXTRA = 4


@dataclass
class KnnGraph:
    n: int
    k: int
    indices: np.ndarray
    distances: np.ndarray

    def neighbors(self, node: int):
        return list(zip(self.indices[node].tolist(), self.distances[node].tolist()))


def build_knn_graph(positions, k: int) -> KnnGraph:
    """Exact k nearest neighbors under L2, ties broken by the lower index.

    When ``n <= k`` every node gets the other ``n - 1`` nodes. Candidate
    neighbors come from a Gram-matrix distance; the final ordering uses
    distances recomputed from coordinate differences.
    """
    X = np.asarray(positions, dtype=np.float64)
    n = X.shape[0]
    if n < 2 or k < 1:
        raise ValueError("need n >= 2 and k >= 1")
    k_eff = min(k, n - 1)
    n_cand = min(n - 1, k_eff + _KNN_EXTRA)
    sq = np.einsum("ij,ij->i", X, X)
    idx_out = np.empty((n, k_eff), dtype=np.int64)
    dist_out = np.empty((n, k_eff))
    for lo in range(0, n, _KNN_ROW_CHUNK):
        hi = min(n, lo + _KNN_ROW_CHUNK)
        rows = np.arange(lo, hi)
        gram = sq[lo:hi, None] + sq[None, :] - 2.0 * (X[lo:hi] @ X.T)
        gram[rows - lo, rows] = np.inf
        if n_cand < n - 1:
            cand = np.argpartition(gram, n_cand - 1, axis=1)[:, :n_cand]
        else:
            cand = np.argsort(gram, axis=1)[:, :n_cand]
        diff = X[cand] - X[lo:hi, None, :]
        d2 = np.einsum("rcj,rcj->rc", diff, diff)
        # lexicographic (distance, index): sort by index, then stable by distance
        o1 = np.argsort(cand, axis=1, kind="stable")
        cand = np.take_along_axis(cand, o1, axis=1)
        d2 = np.take_along_axis(d2, o1, axis=1)
        o2 = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        idx_out[lo:hi] = np.take_along_axis(cand, o2, axis=1)
        dist_out[lo:hi] = np.sqrt(np.take_along_axis(d2, o2, axis=1))
    return KnnGraph(n=n, k=k_eff, indices=idx_out, distances=dist_out)


@dataclass
class DiffusionParams:
    """Hyperparameters and EdgeConv weights of one diffusion module.

    Layer 1 maps edge features ``[z_i, z_j - z_i]`` (``4d``) to ``hidden``.
    Layer 2 maps ``[h_i, h_j - h_i, z_i]`` (``2*hidden + 2d``) to ``2d``. With
    ``d = 256`` and ``hidden = 512`` these are the 1024->512 and 1536->512 layers.
    """

    dim: int = 64
    hidden: int | None = None
    k: int = 15
    t_final: float = 1.0
    rtol: float = 0.01
    atol: float = 0.01
    tau: float = 1.0
    diffusivity: float = 1.0
    seed: int = 0
    w1: np.ndarray = field(default=None, repr=False)
    b1: np.ndarray = field(default=None, repr=False)
    w2: np.ndarray = field(default=None, repr=False)
    b2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = 2 * self.dim
        if not (0 < self.tau <= 1):
            raise ValueError("tau must lie in (0, 1]")
        if self.t_final < 0:
            raise ValueError("t_final must be nonnegative")
        if not (np.isfinite(self.diffusivity) and self.diffusivity >= 0):
            raise ValueError("diffusivity must be finite and nonnegative")
        d2, h = 2 * self.dim, self.hidden
        if self.w1 is None:
            self.w1 = uniform_init(self.seed, "diffusion.w1", (2 * d2, h), 2 * d2)
            self.b1 = uniform_init(self.seed, "diffusion.b1", (h,), 2 * d2)
            self.w2 = uniform_init(self.seed, "diffusion.w2", (2 * h + d2, d2), 2 * h + d2)
            self.b2 = uniform_init(self.seed, "diffusion.b2", (d2,), 2 * h + d2)
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        expected = {"w1": (2 * d2, h), "b1": (h,), "w2": (2 * h + d2, d2), "b2": (d2,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def to_model(self) -> ModelParams:
        scalars = {
            "dim": self.dim, "hidden": self.hidden, "k": self.k, "t_final": float(self.t_final),
            "rtol": float(self.rtol), "atol": float(self.atol), "tau": float(self.tau),
            "diffusivity": float(self.diffusivity), "seed": self.seed,
        }
        return ModelParams({"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}, scalars)

    @classmethod
    def from_model(cls, model: ModelParams) -> "DiffusionParams":
        s = model.scalars
        return cls(
            dim=int(s["dim"]), hidden=int(s["hidden"]), k=int(s["k"]), t_final=s["t_final"],
            rtol=s["rtol"], atol=s["atol"], tau=s["tau"], diffusivity=s["diffusivity"],
            seed=int(s["seed"]),
            w1=model.tensors["w1"], b1=model.tensors["b1"],
            w2=model.tensors["w2"], b2=model.tensors["b2"],
        )

    def zeroed(self) -> "DiffusionParams":
        return DiffusionParams(
            dim=self.dim, hidden=self.hidden, k=self.k, t_final=self.t_final, rtol=self.rtol,
            atol=self.atol, tau=self.tau, diffusivity=0.0, seed=self.seed, w1=np.zeros_like(self.w1),
            b1=np.zeros_like(self.b1), w2=np.zeros_like(self.w2), b2=np.zeros_like(self.b2),
        )


def edgeconv_forward(z: np.ndarray, graph: KnnGraph, params: DiffusionParams) -> np.ndarray:
    """Two max-aggregated EdgeConv layers on the stacked state ``z = [H, I]``.

    Each edge term is linear in ``(z_i, z_j)``, so the per-node and
    per-neighbor products are formed once and combined in the gather-max kernel.
    """
    d2 = z.shape[1]
    if d2 != 2 * params.dim:
        raise ShapeMismatch(f"state width {d2} does not match 2*dim={2 * params.dim}")
    if graph.n != z.shape[0]:
        raise ShapeMismatch("graph and state disagree on node count")
    w1a, w1b = params.w1[:d2], params.w1[d2:]
    node1 = z @ (w1a - w1b) + params.b1
    nbr1 = z @ w1b
    h = kernels.edge_max(node1, nbr1, graph.indices, LEAKY_SLOPE)

    hd = params.hidden
    w2a, w2b, w2c = params.w2[:hd], params.w2[hd:2 * hd], params.w2[2 * hd:]
    node2 = h @ (w2a - w2b) + z @ w2c + params.b2
    nbr2 = h @ w2b
    return kernels.edge_max(node2, nbr2, graph.indices, 1.0)


def attention_diffusion(z: np.ndarray, graph: KnnGraph) -> np.ndarray:
    """``sum_j a_ij (z_j - z_i)`` with the softmax edge weights of ``softmax_attention``."""
    return kernels.neighbor_attention(z, graph.indices)


def stacked_rhs(z: np.ndarray, graph: KnnGraph, params: DiffusionParams) -> np.ndarray:
    out = edgeconv_forward(z, graph, params)
    if params.diffusivity:
        out += params.diffusivity * attention_diffusion(z, graph)
    return out


def diffusion_rhs(state: PairedState, graph: KnnGraph, params: DiffusionParams) -> PairedState:
    """Time derivative ``(dH/dt, dI/dt)`` of the diffusion at ``state``."""
    if state.dim != params.dim:
        raise ShapeMismatch(f"state dim {state.dim} != params dim {params.dim}")
    return PairedState.from_stacked(stacked_rhs(state.stacked(), graph, params))


@dataclass
class DiffusionResult:
    state: PairedState
    stats: SolveStats
    graphs_built: int


def diffuse(state: PairedState, params: DiffusionParams, rhs=None,
            return_info: bool = False):
    """Integrate the diffusion from 0 to ``params.t_final``.

    ``rhs``, if given, replaces the network: it is called as
    ``rhs(t, z, graph)`` on the stacked state and must return an array of the
    same shape. The k-NN graph is rebuilt from the positional block at the
    start of every step.
    """
    if state.dim != params.dim and rhs is None:
        raise ShapeMismatch(f"state dim {state.dim} != params dim {params.dim}")
    d = state.dim
    ctx = {"graph": None, "t": None, "built": 0}

    def begin_step(t, z):
        if ctx["t"] == t and ctx["graph"] is not None:
            return
        ctx["graph"] = build_knn_graph(z[:, d:], params.k) if state.n >= 2 else None
        ctx["t"] = t
        ctx["built"] += 1

    if rhs is None:
        def f(t, z):
            return stacked_rhs(z, ctx["graph"], params)
    else:
        def f(t, z):
            return rhs(t, z, ctx["graph"])

    z_final, stats = integrate(
        f, state.stacked(), params.t_final, params.rtol, params.atol, begin_step=begin_step
    )
    out = PairedState.from_stacked(z_final)
    if return_info:
        return DiffusionResult(out, stats, ctx["built"])
    return out


def softmax_attention(z: np.ndarray, graph: KnnGraph) -> np.ndarray:
    """Neighbor weights ``softmax_j(-||z_i - z_j||^2 / sqrt(D))``; rows sum to 1."""
    return _softmax_from_diff(z[graph.indices] - z[:, None, :])


def _softmax_from_diff(diff: np.ndarray) -> np.ndarray:
    logits = -np.einsum("nkd,nkd->nk", diff, diff) / np.sqrt(diff.shape[2])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def explicit_step(state, graph: KnnGraph, attention=None, tau: float = 1.0):
    """One forward-Euler step ``z_i <- z_i + tau * sum_j a_ij (z_j - z_i)``.

    ``attention`` is an ``(n, k)`` array of edge weights aligned with
    ``graph.indices`` or a callable ``(z, graph) -> weights``; it defaults to
    ``softmax_attention``. Accepts a PairedState or a plain ``(n, D)`` array
    and returns the same kind.

    Raises:
        StabilityViolation: if a weight is negative or ``tau * sum_j a_ij > 1``
            for some node.
    """
    paired = isinstance(state, PairedState)
    z = state.stacked() if paired else np.asarray(state, dtype=np.float64)
    if attention is None:
        attention = softmax_attention
    a = attention(z, graph) if callable(attention) else np.asarray(attention, dtype=np.float64)
    if a.shape != graph.indices.shape:
        raise ShapeMismatch(f"attention shape {a.shape} != graph shape {graph.indices.shape}")
    if np.any(a < 0):
        raise StabilityViolation("negative attention weight")
    row = tau * a.sum(axis=1)
    if np.any(row > 1.0 + 1e-12):
        raise StabilityViolation(f"tau * row sum reaches {row.max():.6g} > 1")
    # convex-combination form of Q z keeps the max-norm bound exact
    self_w = np.clip(1.0 - row, 0.0, 1.0)
    z_next = self_w[:, None] * z + np.einsum("nk,nkd->nd", tau * a, z[graph.indices])
    # nodes equal to all their neighbors are exact fixed points of the update
    unchanged = np.all(z[graph.indices] == z[:, None, :], axis=(1, 2))
    z_next[unchanged] = z[unchanged]
    return PairedState.from_stacked(z_next) if paired else z_next

"""Feature-position self/cross attention integrated as a neural ODE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptor import PairedState
from .errors import ShapeMismatch
from .ode import integrate
from .params import ModelParams, uniform_init

NORM_EPS = 1e-5

# name -> (kind, fan-in key); "proj" tensors are (heads, dim, head_dim)
_PROJ = ("sq", "sk", "sv", "seq", "sek", "cq", "ck", "cv", "ceq", "cek")


@dataclass
class OdeConfig:
    t_final: float = 2.0
    rtol: float = 0.01
    atol: float = 0.01

    def __post_init__(self):
        if self.t_final < 0:
            raise ValueError("t_final must be nonnegative")


@dataclass
class AttentionParams:
    """Weights of the self/cross attention, the merge FFNs and the position path.

    ``heads * head_dim`` is the concatenated attention width; the output
    projections ``s_out`` and ``c_out`` map it back to ``dim``.
    """

    dim: int = 64
    heads: int = 4
    head_dim: int = 32
    ffn_hidden: int | None = None
    seed: int = 0
    weights: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.dim
        shapes = self.expected_shapes()
        if not self.weights:
            self.weights = {
                name: uniform_init(self.seed, f"attention.{name}", shape, fan_in)
                for name, (shape, fan_in) in shapes.items()
            }
        for name, (shape, _) in shapes.items():
            if name not in self.weights:
                raise ShapeMismatch(f"missing attention weight {name!r}")
            arr = np.asarray(self.weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            self.weights[name] = arr

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def expected_shapes(self) -> dict:
        d, hd, w, f = self.dim, self.head_dim, self.width, self.ffn_hidden
        shapes = {name: ((self.heads, d, hd), d) for name in _PROJ}
        shapes.update({
            "s_out": ((w, d), w), "c_out": ((w, d), w),
            "ffn_s1": ((d, f), d), "ffn_s1b": ((f,), d), "ffn_s2": ((f, d), f), "ffn_s2b": ((d,), f),
            "ffn_c1": ((d, f), d), "ffn_c1b": ((f,), d), "ffn_c2": ((f, d), f), "ffn_c2b": ((d,), f),
            "fc1": ((d, d), d), "fc1b": ((d,), d), "fc2": ((d, d), d), "fc2b": ((d,), d),
        })
        return shapes

    def __getitem__(self, name):
        return self.weights[name]

    def replace(self, **weights) -> "AttentionParams":
        merged = dict(self.weights)
        merged.update(weights)
        return AttentionParams(self.dim, self.heads, self.head_dim, self.ffn_hidden, self.seed, merged)

    def to_model(self) -> ModelParams:
        scalars = {"dim": self.dim, "heads": self.heads, "head_dim": self.head_dim,
                   "ffn_hidden": self.ffn_hidden, "seed": self.seed}
        return ModelParams(dict(self.weights), scalars)

    @classmethod
    def from_model(cls, model: ModelParams) -> "AttentionParams":
        s = model.scalars
        return cls(int(s["dim"]), int(s["heads"]), int(s["head_dim"]), int(s["ffn_hidden"]),
                   int(s["seed"]), dict(model.tensors))


def row_normalize(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Zero mean, unit variance per row."""
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_logits(q_in, k_in, qe_in, ke_in, wq, wk, weq, wek):
    """Per-head logits ``(heads, n_q, n_k)``: feature term plus position term."""
    hd = wq.shape[2]
    q = np.einsum("nd,hde->hne", q_in, wq)
    k = np.einsum("nd,hde->hne", k_in, wk)
    qe = np.einsum("nd,hde->hne", qe_in, weq)
    ke = np.einsum("nd,hde->hne", ke_in, wek)
    scale = 1.0 / np.sqrt(hd)
    return (q @ np.swapaxes(k, 1, 2)) * scale + (qe @ np.swapaxes(ke, 1, 2)) * scale


def _multi_head(q_in, kv_in, qe_in, ke_in, wq, wk, wv, weq, wek, w_out, return_weights=False):
    logits = attention_logits(q_in, kv_in, qe_in, ke_in, wq, wk, weq, wek)
    attn = softmax_rows(logits)
    v = np.einsum("nd,hde->hne", kv_in, wv)
    heads = attn @ v
    concat = np.concatenate(list(heads), axis=1)
    out = concat @ w_out
    if return_weights:
        return out, attn
    return out


def _check(state: PairedState, params: AttentionParams):
    if state.dim != params.dim:
        raise ShapeMismatch(f"state dim {state.dim} != attention dim {params.dim}")


def self_attention(state: PairedState, params: AttentionParams, return_weights=False):
    """Multi-head self-attention whose logits add a feature-to-position term."""
    _check(state, params)
    fn = row_normalize(state.features)
    en = row_normalize(state.positions)
    p = params
    return _multi_head(fn, fn, fn, en, p["sq"], p["sk"], p["sv"], p["seq"], p["sek"], p["s_out"],
                       return_weights)


def _ffn(x, w1, b1, w2, b2):
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def self_attention_block(state: PairedState, params: AttentionParams, attended=None):
    """Residual, normalization and FFN around ``self_attention``."""
    if attended is None:
        attended = self_attention(state, params)
    x = row_normalize(state.features + attended)
    p = params
    return x + _ffn(x, p["ffn_s1"], p["ffn_s1b"], p["ffn_s2"], p["ffn_s2b"])


def cross_attention(state_u: PairedState, attended_v, positions_v, params: AttentionParams,
                    attended_u=None, return_weights=False):
    """U-side embedding attending over V.

    Queries come from U's self-attention output, keys and values from V's
    self-attention block output, and the position term compares the two
    positional blocks.
    """
    _check(state_u, params)
    attended_v = np.asarray(attended_v, dtype=np.float64)
    positions_v = np.asarray(positions_v, dtype=np.float64)
    if attended_v.shape[1] != params.dim or positions_v.shape != attended_v.shape:
        raise ShapeMismatch("V-side inputs must both be (|V|, dim)")
    if attended_u is None:
        attended_u = self_attention(state_u, params)
    p = params
    return _multi_head(
        row_normalize(attended_u), row_normalize(attended_v),
        row_normalize(state_u.positions), row_normalize(positions_v),
        p["cq"], p["ck"], p["cv"], p["ceq"], p["cek"], p["c_out"], return_weights,
    )


def position_path(positions: np.ndarray, params: AttentionParams) -> np.ndarray:
    p = params
    return np.tanh(positions @ p["fc1"] + p["fc1b"]) @ p["fc2"] + p["fc2b"]


def combine(attended: np.ndarray, crossed: np.ndarray, params: AttentionParams) -> np.ndarray:
    s = attended + crossed
    p = params
    return s + _ffn(s, p["ffn_c1"], p["ffn_c1b"], p["ffn_c2"], p["ffn_c2b"])


def coupled_rhs(state_u: PairedState, state_v: PairedState, params: AttentionParams):
    """Derivatives of both sides at one instant; cross terms read the other side's current state."""
    s_u = self_attention(state_u, params)
    s_v = self_attention(state_v, params)
    blk_u = self_attention_block(state_u, params, s_u)
    blk_v = self_attention_block(state_v, params, s_v)
    c_u = cross_attention(state_u, blk_v, state_v.positions, params, attended_u=s_u)
    c_v = cross_attention(state_v, blk_u, state_u.positions, params, attended_u=s_v)
    du = PairedState(combine(s_u, c_u, params), position_path(state_u.positions, params))
    dv = PairedState(combine(s_v, c_v, params), position_path(state_v.positions, params))
    return du, dv


def _pack(su: PairedState, sv: PairedState) -> np.ndarray:
    return np.concatenate([su.stacked().ravel(), sv.stacked().ravel()])


def _unpack(y, nu, nv, d):
    a = y[: nu * 2 * d].reshape(nu, 2 * d)
    b = y[nu * 2 * d:].reshape(nv, 2 * d)
    return PairedState(a[:, :d], a[:, d:]), PairedState(b[:, :d], b[:, d:])


def transformer_ode(state_u: PairedState, state_v: PairedState, params: AttentionParams,
                    ode: OdeConfig | None = None, rhs=None, return_stats=False):
    """Integrate both sides jointly from 0 to ``ode.t_final`` with one step sequence.

    ``rhs`` optionally replaces the attention network; it receives and
    returns the packed joint state vector.
    """
    ode = ode or OdeConfig()
    _check(state_u, params)
    _check(state_v, params)
    nu, nv, d = state_u.n, state_v.n, params.dim

    if rhs is None:
        def f(t, y):
            su, sv = _unpack(y, nu, nv, d)
            du, dv = coupled_rhs(su, sv, params)
            return _pack(du, dv)
    else:
        def f(t, y):
            return rhs(t, y)

    y_final, stats = integrate(f, _pack(state_u, state_v), ode.t_final, ode.rtol, ode.atol)
    out_u, out_v = _unpack(y_final, nu, nv, d)
    out_u, out_v = out_u.copy(), out_v.copy()
    if return_stats:
        return out_u, out_v, stats
    return out_u, out_v

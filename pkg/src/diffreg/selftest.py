"""Fast numerical property checks, runnable without the test suite.

Each check returns ``(name, passed, detail)``. ``run_all`` prints one line
per check and returns True when everything passed.
"""
from __future__ import annotations

import time

import numpy as np

from . import _pykernels, kernels
from .descriptor import PairedState
from .diffusion import DiffusionParams, build_knn_graph, diffuse, explicit_step
from .geometry import RigidTransform, compute_metrics, random_rotation, weighted_svd_fit
from .losses import LossWeights, circle_loss_patch, total_loss
from .matching import dual_normalized_correlation, sinkhorn
from .transformer import AttentionParams, self_attention


def check_svd_recovery(trials: int = 100):
    rng = np.random.default_rng(1)
    worst_r = worst_t = 0.0
    for _ in range(trials):
        T = RigidTransform(random_rotation(rng), rng.uniform(-5, 5, 3))
        src = rng.normal(size=(20, 3)) * 3
        m = compute_metrics(weighted_svd_fit(src, T.apply(src), rng.uniform(0.1, 1, 20)), T)
        worst_r, worst_t = max(worst_r, m.rre_deg), max(worst_t, m.rte_cm / 100)
    return "svd_recovery", worst_r < 1e-6 and worst_t < 1e-7, f"rre={worst_r:.2e} rte_m={worst_t:.2e}"


def check_dual_normalization():
    rng = np.random.default_rng(2)
    err = 0.0
    for delta in rng.uniform(0, 3, 20):
        f = np.array([[0.0, 0.0], [delta, 0.0]])
        w = dual_normalized_correlation(f, f).values
        err = max(err, abs(w[0, 0] - 1.0 / (1.0 + np.exp(-delta ** 2)) ** 2))
        err = max(err, abs(dual_normalized_correlation(f[:1], f[1:]).values[0, 0] - 1.0))
    return "dual_normalization", err < 1e-12, f"max_err={err:.2e}"


def check_sinkhorn():
    rng = np.random.default_rng(3)
    err = 0.0
    for _ in range(10):
        P = sinkhorn(rng.normal(size=(8, 8)), 100)
        err = max(err, np.abs(P.sum(0) - 1).max(), np.abs(P.sum(1) - 1).max())
    return "sinkhorn_marginals", err < 1e-6, f"max_err={err:.2e}"


def check_explicit_step():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(60, 6))
    g = build_knn_graph(z, 5)
    const = np.tile(rng.normal(size=6), (60, 1))
    fixed = np.abs(explicit_step(const, g, tau=0.7) - const).max()
    grow = np.abs(explicit_step(z, g, tau=1.0)).max() - np.abs(z).max()
    return "explicit_step", fixed < 1e-12 and grow <= 1e-12, f"fixed={fixed:.1e} growth={grow:.1e}"


def check_linear_ode():
    rng = np.random.default_rng(5)
    z0 = rng.normal(size=(30, 8))
    params = DiffusionParams(dim=4, k=3, seed=0)
    out = diffuse(PairedState.from_stacked(z0), params, rhs=lambda t, z, g: -z).stacked()
    exact = z0 * np.exp(-1.0)
    ok = bool(np.all(np.abs(out - exact) <= 0.01 * np.abs(exact) + 0.01))
    return "adaptive_ode", ok, f"max_err={np.abs(out - exact).max():.2e}"


def check_attention_rows():
    rng = np.random.default_rng(6)
    p = AttentionParams(dim=16, heads=2, head_dim=8, seed=3)
    s = PairedState(rng.normal(size=(7, 16)), rng.normal(size=(7, 16)))
    _, w = self_attention(s, p, return_weights=True)
    err = np.abs(w.sum(axis=-1) - 1).max()
    return "attention_rows", err < 1e-9, f"max_err={err:.2e}"


def check_losses():
    d = np.array([[0.1, 1.4]])
    ov = np.array([[1.0, 0.0]])
    circ = abs(circle_loss_patch(d, ov) - np.log(2.0))
    h = 1e-5
    w = LossWeights(0.3, -0.2)
    _, g = total_loss(2.0, 0.5, w)
    fd = (total_loss(2.0, 0.5, LossWeights(0.3 + h, -0.2))[0] - total_loss(2.0, 0.5, LossWeights(0.3 - h, -0.2))[0]) / (2 * h)
    rel = abs(fd - g[0]) / max(abs(g[0]), 1e-12)
    return "losses", circ < 1e-9 and rel < 1e-6, f"circle_err={circ:.1e} grad_rel={rel:.1e}"


def check_kernel_parity():
    if not kernels.compiled_available():
        return "kernel_parity", True, "compiled kernels not built; fallback only"
    from . import _ckernels

    rng = np.random.default_rng(7)
    h = rng.normal(size=(50, 8))
    idx = rng.integers(0, 50, size=(50, 4))
    a = _ckernels.edge_max(h, h, idx, 0.2)
    b = _pykernels.edge_max(h, h, idx, 0.2)
    R = np.stack([random_rotation(rng) for _ in range(5)])
    t = rng.normal(size=(5, 3))
    src, dst = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    same = np.array_equal(a, b) and np.array_equal(
        _ckernels.count_inliers(R, t, src, dst, 1.0), _pykernels.count_inliers(R, t, src, dst, 1.0)
    )
    same = same and np.allclose(_ckernels.neighbor_attention(h, idx), _pykernels.neighbor_attention(h, idx),
                                rtol=1e-12, atol=1e-12)
    return "kernel_parity", bool(same), f"backend={kernels.BACKEND}"


CHECKS = (check_svd_recovery, check_dual_normalization, check_sinkhorn, check_explicit_step,
          check_linear_ode, check_attention_rows, check_losses, check_kernel_parity)


def run_all(out=print) -> bool:
    ok = True
    for check in CHECKS:
        t0 = time.perf_counter()
        name, passed, detail = check()
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name} ({detail}, {1000 * (time.perf_counter() - t0):.0f} ms)")
    return ok

"""End-to-end pair registration.

Stages: outlier removal, window/patch/point hierarchy, invariant descriptors
and position encodings, graph diffusion at patch and point level, window
features, the feature-position transformer on patches, coarse-to-fine
matching and pose estimation. Each stage can be timed and the three learned
stages can be switched off for ablations.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .descriptor import PairedState, encode_at, encode_positions
from .diffusion import DiffusionParams, diffuse
from .errors import EmptyLevel, RegistrationError
from .estimation import (
    EstimatorConfig,
    estimate_icp,
    estimate_lgr,
    estimate_ransac,
    estimate_svd,
    polish,
)
from .geometry import PointCloud, RigidTransform
from .matching import MatchConfig, hierarchical_match
from .params import ModelParams, derive_seed
from .sampling import Hierarchy, build_hierarchy, radius_outlier_removal
from .transformer import AttentionParams, OdeConfig, coupled_rhs, transformer_ode


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline as a flat record (one key per config-file line)."""

    seed: int = 0
    # sampling
    voxel_point: float = 0.3
    voxel_patch: float = 2.4
    voxel_window: float = 9.6
    gamma: float = 2.0
    outlier_radius: float = 1.5
    outlier_min_neighbors: int = 2
    # descriptors
    dim: int = 64
    point_radius: float = 1.2
    patch_radius: float = 3.0
    descriptor_gain: float = 4.0
    alpha: float = 0.1
    min_wavelength: float = 8.0
    # diffusion
    k: int = 15
    diffusion_t_final: float = 1.0
    diffusion_rtol: float = 0.01
    diffusion_atol: float = 0.01
    tau: float = 1.0
    diffusivity: float = 0.3
    # transformer
    heads: int = 4
    head_dim: int = 32
    ode_t_final: float = 2.0
    ode_rtol: float = 0.01
    ode_atol: float = 0.01
    # matching
    window_topk: int = 16
    n_patch_pairs: int = 128
    point_topk: int = 3
    sinkhorn_iters: int = 100
    dustbin: bool = True
    slack: float = 0.5
    temperature: float = 0.05
    min_similarity: float = 0.5
    min_pairs: int = 3
    # estimation
    method: str = "lgr"
    inlier_radius: float = 0.6
    lgr_refine_iters: int = 5
    lgr_local_samples: int = 32
    ransac_iters: int = 5000
    ransac_sample: int = 3
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    polish_radius: float = 0.25
    polish_iters: int = 3
    # ablation switches
    use_window: bool = True
    use_beltrami: bool = True
    use_transformer: bool = True

    def __post_init__(self):
        if self.dim < 16:
            raise ValueError("dim must be >= 16")

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cast = {}
        for key, val in values.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                cast[key] = val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                cast[key] = int(val)
            elif isinstance(default, float):
                cast[key] = float(val)
            else:
                cast[key] = str(val)
        return cls(**cast)

    def to_dict(self) -> dict:
        return asdict(self)

    def ablation(self, name: str) -> "PipelineConfig":
        """Copy with one stage disabled: ``no_window``, ``no_beltrami`` or ``no_transformer``."""
        flags = {"full": {}, "no_window": {"use_window": False},
                 "no_beltrami": {"use_beltrami": False}, "no_transformer": {"use_transformer": False}}
        if name not in flags:
            raise ValueError(f"unknown variant {name!r}")
        return PipelineConfig(**{**self.to_dict(), **flags[name]})

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            window_topk=self.window_topk, n_patch_pairs=self.n_patch_pairs, point_topk=self.point_topk,
            sinkhorn_iters=self.sinkhorn_iters, dustbin=self.dustbin, slack=self.slack,
            temperature=self.temperature, min_similarity=self.min_similarity,
            min_pairs=self.min_pairs, use_windows=self.use_window,
        )

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            method=self.method, inlier_radius=self.inlier_radius, lgr_refine_iters=self.lgr_refine_iters,
            ransac_iters=self.ransac_iters, ransac_sample=self.ransac_sample,
            icp_max_iters=self.icp_max_iters, icp_tol=self.icp_tol,
            lgr_local_samples=self.lgr_local_samples, seed=self.seed,
        )

    def ode_config(self) -> OdeConfig:
        return OdeConfig(self.ode_t_final, self.ode_rtol, self.ode_atol)


VARIANTS = ("full", "no_window", "no_beltrami", "no_transformer")


@dataclass
class Networks:
    """All seeded weights used by the pipeline."""

    descriptor_seed: int
    diffusion_patch: DiffusionParams
    diffusion_point: DiffusionParams
    attention: AttentionParams
    window_attention: AttentionParams

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Networks":
        def diff(name):
            return DiffusionParams(dim=cfg.dim, k=cfg.k, t_final=cfg.diffusion_t_final,
                                   rtol=cfg.diffusion_rtol, atol=cfg.diffusion_atol, tau=cfg.tau,
                                   diffusivity=cfg.diffusivity,
                                   seed=derive_seed(cfg.seed, name))

        def att(name):
            return AttentionParams(dim=cfg.dim, heads=cfg.heads, head_dim=cfg.head_dim,
                                   seed=derive_seed(cfg.seed, name))

        return cls(derive_seed(cfg.seed, "descriptor"), diff("diffusion_patch"), diff("diffusion_point"),
                   att("attention"), att("window_attention"))

    def to_model(self) -> ModelParams:
        model = ModelParams(scalars={"descriptor_seed": self.descriptor_seed})
        model.merge("diffusion_patch", self.diffusion_patch.to_model())
        model.merge("diffusion_point", self.diffusion_point.to_model())
        model.merge("attention", self.attention.to_model())
        model.merge("window_attention", self.window_attention.to_model())
        return model

    @classmethod
    def from_model(cls, model: ModelParams) -> "Networks":
        return cls(
            int(model.scalars["descriptor_seed"]),
            DiffusionParams.from_model(model.subset("diffusion_patch")),
            DiffusionParams.from_model(model.subset("diffusion_point")),
            AttentionParams.from_model(model.subset("attention")),
            AttentionParams.from_model(model.subset("window_attention")),
        )


def pool_windows(hierarchy: Hierarchy, patch_features: np.ndarray) -> np.ndarray:
    """Max over member-patch features for every window."""
    if len(hierarchy.window_centers) == 0:
        raise EmptyLevel("no windows")
    f = np.asarray(patch_features, dtype=np.float64)
    return np.stack([f[m].max(axis=0) for m in hierarchy.window_members])


def window_features(hier_u: Hierarchy, hier_v: Hierarchy, patch_u, patch_v,
                    params: AttentionParams, cfg: PipelineConfig):
    """Pooled window features refined by one self/cross attention round on each side."""
    su = PairedState(pool_windows(hier_u, patch_u),
                     encode_positions(hier_u.window_centers, cfg.dim, cfg.alpha, cfg.min_wavelength))
    sv = PairedState(pool_windows(hier_v, patch_v),
                     encode_positions(hier_v.window_centers, cfg.dim, cfg.alpha, cfg.min_wavelength))
    du, dv = coupled_rhs(su, sv, params)
    return su.features + du.features, sv.features + dv.features


@dataclass
class Encoded:
    hierarchy: Hierarchy
    patch: PairedState
    point: PairedState


def _timed(diag, key):
    class _T:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            diag[f"time_{key}_ms"] = diag.get(f"time_{key}_ms", 0.0) + 1000.0 * (time.perf_counter() - self.t0)
            if exc[0] is not None and issubclass(exc[0], RegistrationError) and exc[1].stage is None:
                exc[1].stage = key
            return False

    return _T()


def encode_cloud(cloud: PointCloud, cfg: PipelineConfig, nets: Networks, diag: dict, side: str) -> Encoded:
    with _timed(diag, "sampling"):
        clean = radius_outlier_removal(cloud, cfg.outlier_radius, cfg.outlier_min_neighbors)
        hier = build_hierarchy(clean, cfg.voxel_point, cfg.voxel_patch, cfg.voxel_window, cfg.gamma)
    with _timed(diag, "descriptor"):
        support = clean.points
        h_patch = encode_at(hier.patch_centers.points, support, cfg.patch_radius, cfg.dim,
                            nets.descriptor_seed, cfg.descriptor_gain)
        h_point = encode_at(hier.points.points, support, cfg.point_radius, cfg.dim,
                            nets.descriptor_seed, cfg.descriptor_gain)
        i_patch = encode_positions(hier.patch_centers, cfg.dim, cfg.alpha, cfg.min_wavelength)
        i_point = encode_positions(hier.points, cfg.dim, cfg.alpha, cfg.min_wavelength)
    patch = PairedState(h_patch, i_patch)
    point = PairedState(h_point, i_point)
    if cfg.use_beltrami:
        with _timed(diag, "diffusion"):
            if patch.n >= 2:
                patch = diffuse(patch, nets.diffusion_patch)
            if point.n >= 2:
                point = diffuse(point, nets.diffusion_point)
    for key, val in hier.stats().items():
        diag[f"{side}_{key}"] = val
    return Encoded(hier, patch, point)


def register_pair(source: PointCloud, target: PointCloud, cfg: PipelineConfig | None = None,
                  networks: Networks | None = None):
    """Estimate the transform mapping ``source`` onto ``target``.

    Returns ``(transform, point_correspondences, diagnostics)``. Errors carry
    the name of the stage that raised them.
    """
    cfg = cfg or PipelineConfig()
    nets = networks or Networks.from_config(cfg)
    diag: dict = {}
    t_start = time.perf_counter()
    enc_u = encode_cloud(source, cfg, nets, diag, "src")
    enc_v = encode_cloud(target, cfg, nets, diag, "dst")

    patch_u, patch_v = enc_u.patch, enc_v.patch
    if cfg.use_transformer:
        with _timed(diag, "transformer"):
            patch_u, patch_v, stats = transformer_ode(patch_u, patch_v, nets.attention,
                                                      cfg.ode_config(), return_stats=True)
            diag["transformer_steps"] = stats.accepted

    with _timed(diag, "matching"):
        if cfg.use_window:
            win_u, win_v = window_features(enc_u.hierarchy, enc_v.hierarchy, patch_u.features,
                                           patch_v.features, nets.window_attention, cfg)
        else:
            win_u = win_v = None
        match_stats: dict = {}
        result = hierarchical_match(
            enc_u.hierarchy, enc_v.hierarchy, win_u, win_v, patch_u.features, patch_v.features,
            enc_u.point.features, enc_v.point.features, cfg.match_config(), match_stats,
        )
    diag["window_pairs"] = len(result.windows)
    diag["patch_pairs"] = len(result.patches)
    diag["point_pairs"] = len(result.points)
    diag.update(match_stats)

    with _timed(diag, "estimation"):
        src_pts = enc_u.hierarchy.points
        dst_pts = enc_v.hierarchy.points
        est = cfg.estimator_config()
        if cfg.method == "lgr":
            T = estimate_lgr(result.points, result.patches, src_pts, dst_pts, est)
        elif cfg.method == "ransac":
            T = estimate_ransac(result.points, src_pts, dst_pts, est)
        elif cfg.method == "svd":
            T = estimate_svd(result.points, src_pts, dst_pts)
        else:
            T = estimate_icp(source, target, RigidTransform.identity(), est)
        if cfg.method != "icp" and cfg.polish_iters > 0:
            T = polish(T, src_pts.points[result.points.src], dst_pts.points[result.points.dst],
                       cfg.polish_radius, cfg.polish_iters)
    diag["time_total_ms"] = 1000.0 * (time.perf_counter() - t_start)
    diag["result"] = result
    diag["src_hierarchy"] = enc_u.hierarchy
    diag["dst_hierarchy"] = enc_v.hierarchy
    return T, result.points, diag


def format_diagnostics(diag: dict) -> str:
    """``key=value`` lines for the scalar entries."""
    lines = []
    for key, val in diag.items():
        if isinstance(val, float):
            lines.append(f"{key}={val:.3f}")
        elif isinstance(val, (int, str, np.integer)):
            lines.append(f"{key}={val}")
    return "\n".join(lines)

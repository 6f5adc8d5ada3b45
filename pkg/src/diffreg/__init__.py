"""Coarse-to-fine point-cloud registration with diffusion-refined embeddings."""
from .errors import RegistrationError
from .geometry import PointCloud, RigidTransform, apply_transform, compute_metrics, weighted_svd_fit
from .kernels import BACKEND
from .pipeline import PipelineConfig, register_pair

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "PipelineConfig",
    "PointCloud",
    "RegistrationError",
    "RigidTransform",
    "apply_transform",
    "compute_metrics",
    "register_pair",
    "weighted_svd_fit",
]

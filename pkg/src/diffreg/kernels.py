"""Hot-kernel dispatch.

Uses the compiled ``_ckernels`` extension when it imports, otherwise the
NumPy fallback. Set ``DIFFREG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DIFFREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

edge_max = _impl.edge_max
count_inliers = _impl.count_inliers
log_sinkhorn = _impl.log_sinkhorn
neighbor_attention = _impl.neighbor_attention


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True

"""Pick the compiled kernel when it is importable, else the numpy fallback.

Set ``GLMMR2_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

KERNELS = {"python": _kernels_py.agq_logliks}

try:
    from ._agq import agq_logliks as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    KERNELS["cython"] = _compiled

_requested = os.environ.get("GLMMR2_BACKEND", "").strip().lower()
if _requested == "python" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def get_kernel(name=None):
    """Return the kernel called ``name`` (default: the selected backend)."""
    name = name or BACKEND
    if name not in KERNELS:
        raise ValueError(f"backend {name!r} is not available; have {sorted(KERNELS)}")
    return KERNELS[name]

"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise, or when
``MOME_PURE_PYTHON=1`` is set, the numpy fallback is used. ``BACKEND`` names
the active choice.
"""

import os

from . import _fallback

try:
    if os.environ.get("MOME_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def available_backends():
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out


fnv1a64 = _impl.fnv1a64
topk_mask_rows = _impl.topk_mask_rows
moving_average = _impl.moving_average
jacobi_eigvalsh = _impl.jacobi_eigvalsh

__all__ = [
    "BACKEND",
    "available_backends",
    "fnv1a64",
    "topk_mask_rows",
    "moving_average",
    "jacobi_eigvalsh",
]

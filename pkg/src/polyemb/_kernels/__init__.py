"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy
fallback takes over with identical semantics. Set POLYEMB_BACKEND to
``python`` or ``cython`` to force a choice (``cython`` raises if the
extension is missing).
"""

import os

from . import _numpy_backend

_KERNEL_NAMES = [
    "matmul",
    "row_softmax_fwd",
    "row_softmax_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "l2norm_rows_fwd",
    "l2norm_rows_bwd",
    "sq_dist_matrix",
]


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _numpy_backend
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        get_backend("cython")
    except ImportError:
        pass
    else:
        names.append("cython")
    return names


_requested = os.environ.get("POLYEMB_BACKEND", "auto")
if _requested == "auto":
    try:
        _impl = get_backend("cython")
        BACKEND = "cython"
    except ImportError:
        _impl = _numpy_backend
        BACKEND = "python"
elif _requested in ("python", "cython"):
    _impl = get_backend(_requested)
    BACKEND = _requested
else:
    raise ImportError(
        f"POLYEMB_BACKEND={_requested!r} not recognized "
        "(expected 'auto', 'python' or 'cython')"
    )

matmul = _impl.matmul
row_softmax_fwd = _impl.row_softmax_fwd
row_softmax_bwd = _impl.row_softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
l2norm_rows_fwd = _impl.l2norm_rows_fwd
l2norm_rows_bwd = _impl.l2norm_rows_bwd
sq_dist_matrix = _impl.sq_dist_matrix

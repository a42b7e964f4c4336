"""Selection kernels with a compiled core and a numpy fallback.

The backend is chosen once at import time. Set DCTSIM_KERNELS=numpy to force
the fallback, or DCTSIM_KERNELS=compiled to require the extension.
"""

import os

import numpy as np

from . import _numpy

_requested = os.environ.get("DCTSIM_KERNELS", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise RuntimeError(f"DCTSIM_KERNELS must be auto|compiled|numpy, got {_requested!r}")

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from . import _select as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
if _impl is None:
    _impl = _numpy

BACKEND = "numpy" if _impl is _numpy else "compiled"

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_vector(x):
    a = np.ascontiguousarray(x).ravel()
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float64)
    return a


def kth_abs_value(x, k: int) -> float:
    """k-th smallest absolute value of x (1-indexed), flattening x first."""
    a = _as_vector(x)
    if a.size == 0:
        raise ValueError("empty vector")
    if not 1 <= k <= a.size:
        raise ValueError(f"k={k} out of range [1, {a.size}]")
    return float(_impl.kth_abs_value(a, k))


def row_kth_abs_value(x, k: int):
    """Per-row k-th smallest absolute value (1-indexed) of a 2-D array."""
    a = np.ascontiguousarray(x)
    if a.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {a.shape}")
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float64)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("empty matrix")
    if not 1 <= k <= a.shape[1]:
        raise ValueError(f"k={k} out of range [1, {a.shape[1]}]")
    return np.asarray(_impl.row_kth_abs_value(a, k))

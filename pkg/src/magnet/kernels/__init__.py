"""Scan kernel backends.

The compiled Cython extension is used when it was built and the inputs are
float64; otherwise the pure numpy fallback runs. Set MAGNET_KERNELS=numpy to
force the fallback regardless. A given install always selects the same
backend, so outputs stay reproducible within an environment.
"""

import os

import numpy as np

from . import scan_numpy

if os.environ.get("MAGNET_KERNELS", "").strip().lower() == "numpy":
    _compiled = None
else:
    try:
        from . import _scan as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

COMPILED = _compiled is not None


def backend_name() -> str:
    return "compiled" if COMPILED else "numpy"


def _all_f64(*arrays) -> bool:
    return all(a.dtype == np.float64 for a in arrays)


def scan_forward(x, delta, A, B, C):
    if COMPILED and _all_f64(x, delta, A, B, C):
        x, delta, A, B, C = (np.ascontiguousarray(a) for a in (x, delta, A, B, C))
        return _compiled.scan_forward(x, delta, A, B, C)
    return scan_numpy.scan_forward(x, delta, A, B, C)


def scan_backward(x, delta, A, B, C, hs, gy):
    if COMPILED and _all_f64(x, delta, A, B, C, hs, gy):
        x, delta, A, B, C, hs, gy = (
            np.ascontiguousarray(a) for a in (x, delta, A, B, C, hs, gy)
        )
        return _compiled.scan_backward(x, delta, A, B, C, hs, gy)
    return scan_numpy.scan_backward(x, delta, A, B, C, hs, gy)

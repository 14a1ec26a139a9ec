"""Kernel dispatch: compiled kernels when built, numpy fallback otherwise.

Set ``RELBRIDGE_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
implementation in use.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("RELBRIDGE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _c2(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    if _compiled is not None:
        return _compiled.matmul(_c2(a), _c2(b))
    return _fallback.matmul(a, b)


def bmm(a, b):
    if _compiled is not None:
        return _compiled.bmm(_c2(a), _c2(b))
    return _fallback.bmm(a, b)


def spmm(indptr, indices, data, x):
    if _compiled is not None:
        return _compiled.spmm(
            np.ascontiguousarray(indptr, dtype=np.int64),
            np.ascontiguousarray(indices, dtype=np.int64),
            _c2(data),
            _c2(x),
        )
    return _fallback.spmm(indptr, indices, data, x)


def implementations():
    """Map backend name -> kernel namespace, for benchmarks and cross-checks."""
    impls = {"numpy": _fallback}
    try:
        from . import _ckernels
    except ImportError:
        return impls
    impls["cython"] = _ckernels
    return impls

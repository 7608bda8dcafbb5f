"""Hot-loop kernels, compiled when the extension is importable.

Set ``CAFIELD_PURE_PYTHON=1`` to force the numpy fallback. The dense
contractions (``aggregate``, ``scatter``) default to the numpy path in
every backend because batched BLAS matmul beats the compiled loops on one
core; pass ``impl`` to pick a backend explicitly.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("CAFIELD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def nearest_sqdist(A, B, impl=None):
    A, B = _f64(A).reshape(-1, 3), _f64(B).reshape(-1, 3)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("nearest_sqdist needs non-empty point sets")
    return (impl or _impl).nearest_sqdist(A, B)


def aggregate(K, idx, S, impl=None):
    return (impl or _pykernels).aggregate(_f64(K), _i64(idx), _f64(S))


def scatter(K, idx, G, n_src, impl=None):
    return (impl or _pykernels).scatter(_f64(K), _i64(idx), _f64(G), int(n_src))


def backends():
    """Available implementations keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out

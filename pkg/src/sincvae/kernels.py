"""Backend selection for the convolution kernels.

The compiled ``_ckernels`` extension is used when it imports and the data is
float64; otherwise the numpy implementation in ``_kernels_py`` is used. Set
``SINCVAE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("SINCVAE_PURE_PYTHON"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _pick(*arrays):
    if _compiled is not None and all(a.dtype == np.float64 for a in arrays):
        return _compiled
    return _kernels_py


def conv1d_forward(x, w, stride):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    return _pick(x, w).conv1d_forward(x, w, stride)


def conv1d_backward_weight(gy, x, stride, K):
    gy = np.ascontiguousarray(gy)
    x = np.ascontiguousarray(x)
    return np.asarray(_pick(gy, x).conv1d_backward_weight(gy, x, stride, K))


def conv1d_backward_input(gy, w, stride, T):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    return np.asarray(_pick(gy, w).conv1d_backward_input(gy, w, stride, T))

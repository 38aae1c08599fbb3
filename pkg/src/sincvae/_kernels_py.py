"""Pure-numpy convolution kernels.

Reference implementation for the compiled ``_ckernels`` module; both expose the
same three functions and agree to rounding. All arrays are C-contiguous,
inputs are already padded, and the operation is cross-correlation::

    y[b, o, t] = sum_{c, k} w[o, c, k] * x[b, c, t * stride + k]
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, K, stride):
    # (B, Cin, Tout, K) view, no copy
    return sliding_window_view(x, K, axis=2)[:, :, ::stride, :]


def conv1d_forward(x, w, stride):
    K = w.shape[2]
    win = _windows(x, K, stride)
    y = np.tensordot(win, w, axes=([1, 3], [1, 2]))
    return np.ascontiguousarray(y.transpose(0, 2, 1))


def conv1d_backward_weight(gy, x, stride, K):
    win = _windows(x, K, stride)
    return np.ascontiguousarray(np.tensordot(gy, win, axes=([0, 2], [0, 2])))


def conv1d_backward_input(gy, w, stride, T):
    B, _, Tout = gy.shape
    Cin, K = w.shape[1], w.shape[2]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # (B, Tout, Cin, K)
    gx = np.zeros((B, Cin, T), dtype=gy.dtype)
    span = stride * (Tout - 1) + 1
    for k in range(K):
        gx[:, :, k:k + span:stride] += cols[:, :, :, k].transpose(0, 2, 1)
    return gx

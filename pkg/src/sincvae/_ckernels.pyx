# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# with cdivision, ``//`` truncates toward zero on typed ints: write ceilings as (a + b - 1) // b
"""Compiled convolution kernels, drop-in for ``_kernels_py`` (float64 only).

All three operations reduce to two register-blocked micro-kernels over lists
of contiguous rows:

* ``_combine``: ``out[o, t] = sum_r W[o, r] * row_r[t]`` in 4 x 8 tiles
  (forward pass, and the input gradient as a correlation per stride phase);
* ``_dots``: ``out[o, r] += sum_t a_o[t] * b_r[t]`` in 4 x 2 blocks with
  4-lane partial sums (weight gradient).

Strided inputs are split into ``stride`` phases so every row is contiguous.
Summation order is fixed, so results are deterministic run to run; they may
differ from the numpy backend in the last bits.
"""
import numpy as np
from libc.stdlib cimport free, malloc

DEF TB = 8   # time steps per tile
DEF OB = 4   # outputs per tile
DEF LANES = 4
DEF TW = 16  # time steps per tile when there are too few outputs to fill OB


cdef void _combine(double* out, Py_ssize_t o_stride, Py_ssize_t t_stride, Py_ssize_t O, Py_ssize_t n,
                   const double* W, Py_ssize_t R, const double** rows) noexcept nogil:
    # W is blocked (ceil(O / OB), R, OB), zero past output O, so one tile's weights
    # for row r are contiguous; rows are readable for ceil(n / TW) * TW values
    cdef double acc[TB][OB]
    cdef Py_ssize_t o0, t0, r, i, j, ob, tb
    cdef const double* x
    cdef const double* w
    for o0 in range(0, O, OB):
        ob = O - o0 if O - o0 < OB else OB
        for t0 in range(0, n, TB):
            tb = n - t0 if n - t0 < TB else TB
            for j in range(TB):
                for i in range(OB):
                    acc[j][i] = 0.0
            w = W + o0 * R
            for r in range(R):
                x = rows[r] + t0
                for j in range(TB):
                    for i in range(OB):
                        acc[j][i] += w[i] * x[j]
                w += OB
            for i in range(ob):
                for j in range(tb):
                    out[(o0 + i) * o_stride + (t0 + j) * t_stride] = acc[j][i]


cdef void _combine_narrow(double* out, Py_ssize_t o_stride, Py_ssize_t t_stride, Py_ssize_t O,
                          Py_ssize_t n, const double* W, Py_ssize_t R, const double** rows) noexcept nogil:
    # one output at a time, vectorized over TW time steps; W layout as in _combine
    cdef double acc[TW]
    cdef Py_ssize_t o, t0, r, j, tb
    cdef const double* x
    cdef double wv
    for o in range(O):
        for t0 in range(0, n, TW):
            tb = n - t0 if n - t0 < TW else TW
            for j in range(TW):
                acc[j] = 0.0
            for r in range(R):
                x = rows[r] + t0
                wv = W[(o // OB) * R * OB + r * OB + o % OB]
                for j in range(TW):
                    acc[j] += wv * x[j]
            for j in range(tb):
                out[o * o_stride + (t0 + j) * t_stride] = acc[j]


cdef inline void _combine_any(double* out, Py_ssize_t o_stride, Py_ssize_t t_stride, Py_ssize_t O,
                              Py_ssize_t n, const double* W, Py_ssize_t R, const double** rows) noexcept nogil:
    if O <= 2:
        _combine_narrow(out, o_stride, t_stride, O, n, W, R, rows)
    else:
        _combine(out, o_stride, t_stride, O, n, W, R, rows)


cdef void _dots(double* out, Py_ssize_t O, Py_ssize_t R, const double** a, const double** b,
                Py_ssize_t n) noexcept nogil:
    # out is (ceil(O / OB) * OB, ceil(R / 2) * 2); a and b are padded with zero rows
    cdef double acc[OB][2][LANES]
    cdef double s
    cdef Py_ssize_t o0, r0, i, j, l, t, n4 = n - n % LANES, Rp = R + R % 2
    for o0 in range(0, O, OB):
        for r0 in range(0, R, 2):
            for i in range(OB):
                for j in range(2):
                    for l in range(LANES):
                        acc[i][j][l] = 0.0
            for t in range(0, n4, LANES):
                for i in range(OB):
                    for j in range(2):
                        for l in range(LANES):
                            acc[i][j][l] += a[o0 + i][t + l] * b[r0 + j][t + l]
            for i in range(OB):
                for j in range(2):
                    s = (acc[i][j][0] + acc[i][j][1]) + (acc[i][j][2] + acc[i][j][3])
                    for t in range(n4, n):
                        s += a[o0 + i][t] * b[r0 + j][t]
                    out[(o0 + i) * Rp + r0 + j] += s


def _phases(x, Py_ssize_t stride, Py_ssize_t extra):
    # (B, C, T) -> (B, C, stride, ceil(T / stride) + extra) with [.., p, j] = x[.., j * stride + p]
    B, C, T = x.shape
    n = (T + stride - 1) // stride
    out = np.zeros((B, C, stride, n + extra))
    for p in range(stride):
        seg = x[:, :, p::stride]
        out[:, :, p, :seg.shape[2]] = seg
    return out


def _blocked(w2d):
    # (O, R) -> (ceil(O / OB), R, OB) with zero padding, flattened row-major
    O, R = w2d.shape
    out = np.zeros(((O + OB - 1) // OB * OB, R))
    out[:O] = w2d
    return np.ascontiguousarray(out.reshape(-1, OB, R).transpose(0, 2, 1)).reshape(-1, R)


def conv1d_forward(x, w, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], T = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Tout = (T - K) // stride + 1
    cdef Py_ssize_t R = Cin * K, b, c, k
    cdef double[:, :, :, ::1] xp = _phases(x, stride, TW)
    cdef double[:, ::1] W = _blocked(np.ascontiguousarray(w).reshape(Cout, R))
    out = np.zeros((B, Cout, Tout), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef const double** rows = <const double**> malloc(R * sizeof(double*))
    if rows == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for c in range(Cin):
                    for k in range(K):
                        rows[c * K + k] = &xp[b, c, k % stride, k // stride]
                _combine_any(&y[b, 0, 0], Tout, 1, Cout, Tout, &W[0, 0], R, rows)
    finally:
        free(rows)
    return out


def conv1d_backward_weight(gy, x, Py_ssize_t stride, Py_ssize_t K):
    cdef Py_ssize_t B = gy.shape[0], Cout = gy.shape[1], Tout = gy.shape[2]
    cdef Py_ssize_t Cin = x.shape[1], R = Cin * K
    cdef Py_ssize_t Op = (Cout + OB - 1) // OB * OB, Rp = R + R % 2, b, o, c, k
    cdef double[:, :, :, ::1] xp = _phases(x, stride, 0)
    cdef const double[:, :, ::1] g = gy
    cdef double[::1] zeros = np.zeros(max(Tout, 1))
    acc_arr = np.zeros((Op, Rp))
    cdef double[:, ::1] acc = acc_arr
    cdef const double** a = <const double**> malloc(Op * sizeof(double*))
    cdef const double** bb = <const double**> malloc(Rp * sizeof(double*))
    if a == NULL or bb == NULL:
        free(a)
        free(bb)
        raise MemoryError()
    try:
        with nogil:
            for o in range(Cout, Op):
                a[o] = &zeros[0]
            for k in range(R, Rp):
                bb[k] = &zeros[0]
            for b in range(B):
                for o in range(Cout):
                    a[o] = &g[b, o, 0]
                for c in range(Cin):
                    for k in range(K):
                        bb[c * K + k] = &xp[b, c, k % stride, k // stride]
                _dots(&acc[0, 0], Cout, R, a, bb, Tout)
    finally:
        free(a)
        free(bb)
    return np.ascontiguousarray(acc_arr[:Cout, :R]).reshape(Cout, Cin, K)


def conv1d_backward_input(gy, w, Py_ssize_t stride, Py_ssize_t T):
    cdef Py_ssize_t B = gy.shape[0], Cout = gy.shape[1], Tout = gy.shape[2]
    cdef Py_ssize_t Cin = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t M = (K + stride - 1) // stride  # taps per phase, at most
    cdef Py_ssize_t p, b, o, c, m, taps, n_p, R
    # gy shifted right by M - 1 zeros, with a readable tail for whole tiles
    gpad = np.zeros((B, Cout, M - 1 + (T + stride - 1) // stride + TW))
    gpad[:, :, M - 1:M - 1 + Tout] = gy
    cdef double[:, :, ::1] gp = gpad
    out = np.zeros((B, Cin, T), dtype=np.float64)
    cdef double[:, :, ::1] gx = out
    cdef double[:, ::1] W
    cdef const double** rows = <const double**> malloc(Cout * M * sizeof(double*))
    if rows == NULL:
        raise MemoryError()
    try:
        for p in range(min(stride, T)):
            taps = (K - p + stride - 1) // stride if p < K else 0
            if taps == 0:
                continue
            n_p = (T - p + stride - 1) // stride
            R = Cout * taps
            # W[c, (o, m)] = w[o, c, p + m * stride]
            W = _blocked(np.ascontiguousarray(
                np.asarray(w)[:, :, p::stride][:, :, :taps].transpose(1, 0, 2)).reshape(Cin, R))
            with nogil:
                for b in range(B):
                    for o in range(Cout):
                        for m in range(taps):
                            rows[o * taps + m] = &gp[b, o, M - 1 - m]
                    _combine_any(&gx[b, 0, p], T, stride, Cin, n_p, &W[0, 0], R, rows)
    finally:
        free(rows)
    return out

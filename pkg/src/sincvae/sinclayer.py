"""Learnable sinc bandpass filterbank.

Each filter is parametrized by two unconstrained cutoffs ``(f1, f2)`` in Hz.
They are mapped to ordered non-negative band edges, turned into the
difference of two ideal low-pass impulse responses, and tapered with a
Hamming window. Only the cutoffs are learned; the taps are recomputed on
every forward pass.
"""
from __future__ import annotations

import csv
import logging

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, conv1d, make_node, reshape

log = logging.getLogger(__name__)


def effective_cutoffs(f1, f2):
    """Map raw cutoffs to band edges with ``0 <= f1_abs <= f2_abs``.

    ``f2_abs`` is measured from ``f1_abs`` (not from the raw ``f1``) so the
    ordering holds for negative raw values too.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    f1_abs = np.abs(f1)
    f2_abs = f1_abs + np.abs(f2 - f1)
    if f1_abs.ndim == 0:
        return float(f1_abs), float(f2_abs)
    return f1_abs, f2_abs


def hamming_window(L):
    """``0.54 - 0.46 cos(2 pi n / L)`` for ``n = 0 .. L-1``."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    n = np.arange(L)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / L)


def centered_hamming(L):
    # Same cosine, sampled at n + 1/2 so the peak sits on the centre tap of an
    # odd-length kernel and the taper is exactly symmetric.
    n = np.arange(L) + 0.5
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / L)
    return 0.5 * (w + w[::-1])


def _check_length(L):
    if L < 3 or L % 2 == 0:
        raise ValueError(f"kernel length must be odd and >= 3, got {L}")


def _tap_times(L, fs):
    half = (L - 1) // 2
    return np.arange(-half, half + 1) / fs


def _lowpass(f, t):
    # 2 f sinc(2 pi f t) with sinc(0) = 1; f has shape (F, 1), t shape (L,)
    arg = 2.0 * np.pi * f * t
    out = np.empty(np.broadcast_shapes(f.shape, t.shape))
    zero = t == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:] = np.sin(arg) / (np.pi * t)
    out[:, zero] = 2.0 * np.broadcast_to(f, out.shape)[:, zero]
    return out


def sinc_kernel(f1, f2, L, fs):
    """Windowed bandpass taps for one filter (plain numpy)."""
    _check_length(L)
    if fs <= 0:
        raise ValueError("sampling rate must be positive")
    f1a, f2a = effective_cutoffs(f1, f2)
    t = _tap_times(L, fs)
    g = _lowpass(np.array([[f2a]]), t) - _lowpass(np.array([[f1a]]), t)
    return g[0] * centered_hamming(L)


def sinc_kernels(raw, L, fs) -> Tensor:
    """Differentiable kernel bank.

    ``raw`` is an (F, 2) tensor of raw ``(f1, f2)`` pairs; returns an (F, L)
    tensor of taps. The derivative of ``2 f sinc(2 pi f t)`` with respect to
    ``f`` is ``2 cos(2 pi f t)``, including at ``t = 0``.
    """
    _check_length(L)
    raw = as_tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise ShapeError(f"raw cutoffs must be (filters, 2), got {raw.shape}")
    f1 = raw.data[:, :1]
    f2 = raw.data[:, 1:]
    f1a = np.abs(f1)
    f2a = f1a + np.abs(f2 - f1)
    t = _tap_times(L, fs)
    win = centered_hamming(L)
    taps = (_lowpass(f2a, t) - _lowpass(f1a, t)) * win
    if (f2a > fs / 2).any():
        log.warning("sinc filterbank: upper cutoff above Nyquist (%.3f Hz > %.3f Hz)",
                    float(f2a.max()), fs / 2)

    def backward(g):
        gw = g * win
        g_f2a = (gw * 2.0 * np.cos(2.0 * np.pi * f2a * t)).sum(axis=1, keepdims=True)
        g_f1a = -(gw * 2.0 * np.cos(2.0 * np.pi * f1a * t)).sum(axis=1, keepdims=True)
        s1 = np.sign(f1)
        s21 = np.sign(f2 - f1)
        g_f1 = g_f1a * s1 + g_f2a * (s1 - s21)
        g_f2 = g_f2a * s21
        return (np.concatenate([g_f1, g_f2], axis=1),)

    return make_node(taps, (raw,), backward, "sinc_kernels")


def sinc_forward(x, kernels) -> Tensor:
    """Apply every filter to every input channel (``same`` padding).

    ``x`` is (batch, channels, time); output is (batch, channels * filters,
    time) with channel ``c * filters + f`` holding filter ``f`` on channel ``c``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3:
        raise ShapeError(f"sinc layer expects (batch, channels, time), got {x.shape}")
    B, C, T = x.shape
    F, L = kernels.shape
    if T < L:
        raise ShapeError(f"window length {T} is shorter than the sinc kernel ({L})")
    flat = reshape(x, (B * C, 1, T))
    y = conv1d(flat, reshape(kernels, (F, 1, L)), padding="same")
    return reshape(y, (B, C * F, T))


def init_cutoffs(filter_count, fs, seed):
    """Uniform draws in ``[0, fs/2]``, each pair sorted so ``f1 <= f2``."""
    if filter_count < 1:
        raise ValueError("filter_count must be >= 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.uniform(0.0, fs / 2.0, size=(filter_count, 2)), axis=1)


class SincFilterbank:
    """Learnable cutoffs plus the fixed kernel length and sampling rate."""

    def __init__(self, filter_count, kernel_length, fs, seed=0, raw_cutoffs=None):
        _check_length(kernel_length)
        if fs <= 0:
            raise ValueError("sampling rate must be positive")
        if raw_cutoffs is None:
            raw_cutoffs = init_cutoffs(filter_count, fs, seed)
        raw_cutoffs = np.asarray(raw_cutoffs, dtype=float)
        if raw_cutoffs.shape != (filter_count, 2):
            raise ShapeError(f"expected {filter_count} cutoff pairs, got shape {raw_cutoffs.shape}")
        self.filter_count = filter_count
        self.kernel_length = kernel_length
        self.fs = fs
        self.raw = Tensor(raw_cutoffs, requires_grad=True, name="sinc.cutoffs")

    def kernels(self) -> Tensor:
        return sinc_kernels(self.raw, self.kernel_length, self.fs)

    def __call__(self, x) -> Tensor:
        return sinc_forward(x, self.kernels())

    def band_edges(self):
        """(F, 2) array of effective ``(f1_abs, f2_abs)`` in Hz."""
        f1a, f2a = effective_cutoffs(self.raw.data[:, 0], self.raw.data[:, 1])
        return np.stack([f1a, f2a], axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filter_index", "f1_abs_hz", "f2_abs_hz"])
            for i, (lo, hi) in enumerate(self.band_edges()):
                w.writerow([i, repr(float(lo)), repr(float(hi))])


def frequency_response(taps, fs, nfft=1024):
    """Magnitude response on ``rfftfreq(nfft, 1/fs)``."""
    mag = np.abs(np.fft.rfft(taps, n=nfft))
    return np.fft.rfftfreq(nfft, 1.0 / fs), mag


__all__ = [
    "SincFilterbank", "centered_hamming", "effective_cutoffs", "frequency_response",
    "hamming_window", "init_cutoffs", "sinc_forward", "sinc_kernel", "sinc_kernels",
]

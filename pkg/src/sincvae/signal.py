"""Preprocessing: windowing, z-scoring, zero-phase FIR filtering, splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

NON_SEIZURE, SEIZURE = 0, 1
PHASES = ("interictal", "preictal", "ictal", "postictal")


@dataclass
class TimeSeriesRecording:
    data: np.ndarray  # (channels, samples), physical units
    fs: float
    channel_names: list = field(default_factory=list)
    source_id: str = ""

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.channel_names) != self.data.shape[0]:
            raise ValueError("one channel name per channel required")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.fs


@dataclass
class WindowSet:
    windows: np.ndarray  # (count, channels, window_len)
    start_times: np.ndarray  # seconds
    fs: float
    labels: np.ndarray | None = None  # uint8, NON_SEIZURE / SEIZURE
    phases: np.ndarray | None = None  # uint8 index into PHASES

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=float)
        if self.windows.ndim != 3:
            raise ValueError(f"windows must be (count, channels, length), got {self.windows.shape}")
        self.start_times = np.asarray(self.start_times, dtype=float)
        if self.start_times.shape != (len(self.windows),):
            raise ValueError("one start time per window required")
        for name in ("labels", "phases"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.uint8)
                if v.shape != (len(self.windows),):
                    raise ValueError(f"one {name[:-1]} per window required")
                setattr(self, name, v)

    def __len__(self):
        return len(self.windows)

    @property
    def window_len(self):
        return self.windows.shape[2]

    @property
    def n_channels(self):
        return self.windows.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return WindowSet(
            self.windows[idx], self.start_times[idx], self.fs,
            None if self.labels is None else self.labels[idx],
            None if self.phases is None else self.phases[idx])


def segment_windows(rec: TimeSeriesRecording, window_seconds=1.0, stride_seconds=None, label=None):
    """Cut ``rec`` into fixed windows of ``floor(window_seconds * fs)`` samples.

    The trailing partial window is dropped; a recording shorter than one
    window gives an empty set.
    """
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    stride_seconds = window_seconds if stride_seconds is None else stride_seconds
    if stride_seconds <= 0:
        raise ValueError("stride_seconds must be positive")
    wlen = int(np.floor(window_seconds * rec.fs))
    step = int(np.floor(stride_seconds * rec.fs))
    if wlen < 1 or step < 1:
        raise ValueError("window or stride shorter than one sample")
    n = rec.n_samples
    starts = np.arange(0, n - wlen + 1, step) if n >= wlen else np.arange(0)
    if len(starts):
        view = np.lib.stride_tricks.sliding_window_view(rec.data, wlen, axis=1)[:, starts, :]
        windows = np.ascontiguousarray(view.transpose(1, 0, 2))
    else:
        windows = np.zeros((0, rec.n_channels, wlen))
    labels = None if label is None else np.full(len(starts), label, dtype=np.uint8)
    return WindowSet(windows, starts / rec.fs, rec.fs, labels)


def concat_windows(sets):
    sets = [s for s in sets if len(s)]
    if not sets:
        raise ValueError("nothing to concatenate")
    shapes = {s.windows.shape[1:] for s in sets}
    if len(shapes) != 1:
        raise ValueError(f"window shapes differ: {sorted(shapes)}")

    def cat(attr):
        vals = [getattr(s, attr) for s in sets]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    return WindowSet(
        np.concatenate([s.windows for s in sets]),
        np.concatenate([s.start_times for s in sets]),
        sets[0].fs, cat("labels"), cat("phases"))


# z-score --------------------------------------------------------------------

@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


def _as_channel_major(x):
    # WindowSet / (count, C, L) -> (C, count * L); recording / (C, N) stays
    if isinstance(x, WindowSet):
        x = x.windows
    elif isinstance(x, TimeSeriesRecording):
        x = x.data
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        return x.transpose(1, 0, 2).reshape(x.shape[1], -1)
    return np.atleast_2d(x)


def fit_zscore(data) -> ZScoreStats:
    """Per-channel mean and population std of training data."""
    x = _as_channel_major(data)
    return ZScoreStats(x.mean(axis=1), x.std(axis=1))


def zscore(data, stats: ZScoreStats):
    """``(x - mean) / std`` per channel; channels with std < 1e-12 become 0."""
    degenerate = stats.std < 1e-12
    scale = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, stats.std))
    if isinstance(data, WindowSet):
        w = (data.windows - stats.mean[None, :, None]) * scale[None, :, None]
        return replace(data, windows=w)
    if isinstance(data, TimeSeriesRecording):
        return replace(data, data=(data.data - stats.mean[:, None]) * scale[:, None])
    x = np.asarray(data, dtype=float)
    if x.ndim == 3:
        return (x - stats.mean[None, :, None]) * scale[None, :, None]
    if x.ndim == 1:
        return (x - stats.mean[0]) * scale[0]
    return (x - stats.mean[:, None]) * scale[:, None]


# FIR filtering --------------------------------------------------------------

def design_fir(kind, fs, cutoffs, numtaps=255):
    """Hamming-windowed sinc FIR taps.

    ``kind`` is ``"lowpass"`` (``cutoffs`` = fc) or ``"bandpass"``
    (``cutoffs`` = (f_lo, f_hi)). Passband gain is normalized to 1 at DC
    (lowpass) or at the band centre (bandpass).
    """
    if numtaps % 2 == 0 or numtaps < 3:
        raise ValueError("numtaps must be odd and >= 3")
    nyq = fs / 2.0
    n = np.arange(numtaps) - (numtaps - 1) / 2
    win = np.hamming(numtaps)

    def lp(fc):
        return 2.0 * fc / fs * np.sinc(2.0 * fc / fs * n)

    if kind == "lowpass":
        fc = float(np.atleast_1d(cutoffs)[0])
        if not 0 < fc < nyq:
            raise ValueError(f"cutoff {fc} Hz must lie in (0, Nyquist={nyq} Hz)")
        h = lp(fc) * win
        return h / h.sum()
    if kind == "bandpass":
        lo, hi = (float(c) for c in cutoffs)
        if not 0 < lo < hi < nyq:
            raise ValueError(f"band ({lo}, {hi}) Hz must satisfy 0 < lo < hi < Nyquist={nyq} Hz")
        h = (lp(hi) - lp(lo)) * win
        centre = 0.5 * (lo + hi)
        gain = abs(np.sum(h * np.exp(-2j * np.pi * centre / fs * n)))
        return h / gain
    raise ValueError(f"unknown filter kind {kind!r}")


def filtfilt_fir(x, taps):
    """Forward-backward FIR along the last axis with reflection padding."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    pad = min(3 * len(taps), n - 1)
    if pad > 0:
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        xp = np.pad(x, widths, mode="reflect")
    else:
        xp = x

    def run(v):
        return np.convolve(v, taps, mode="same")

    y = np.apply_along_axis(lambda v: run(run(v[::-1])[::-1]), -1, xp)
    return y[..., pad:pad + n] if pad > 0 else y


def fir_filter(rec, kind, cutoffs, numtaps=255):
    """Zero-phase low-pass / band-pass filtering of a recording or array."""
    if isinstance(rec, TimeSeriesRecording):
        taps = design_fir(kind, rec.fs, cutoffs, numtaps)
        return replace(rec, data=filtfilt_fir(rec.data, taps))
    raise TypeError("fir_filter expects a TimeSeriesRecording; use filtfilt_fir for arrays")


# dataset splits -------------------------------------------------------------

def split_bonn(recordings, fraction=0.2):
    """Hold out the final ``fraction`` of segments (by order, unshuffled)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    recordings = list(recordings)
    n_test = int(round(len(recordings) * fraction))
    cut = len(recordings) - n_test
    return recordings[:cut], recordings[cut:]


def sample_test_minutes(pool: WindowSet, minutes=10, seed=0):
    """Draw ``60 * minutes`` windows without replacement; return (test, rest)."""
    need = int(round(60 * minutes))
    if need > len(pool):
        raise ValueError(f"need {need} windows for {minutes} min of test data, only {len(pool)} available")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pool), size=need, replace=False))
    rest = np.setdiff1d(np.arange(len(pool)), chosen)
    return pool.subset(chosen), pool.subset(rest)


# SVWS container -------------------------------------------------------------

MAGIC = b"SVWS"
FORMAT_VERSION = 1


def save_windows(ws: WindowSet, path):
    flags = (1 if ws.labels is not None else 0) | (2 if ws.phases is not None else 0)
    count, channels, length = ws.windows.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQQdB", count, channels, length, float(ws.fs), flags))
        fh.write(np.asarray(ws.start_times, dtype="<f8").tobytes())
        fh.write(np.asarray(ws.windows, dtype="<f8").tobytes())
        if ws.labels is not None:
            fh.write(ws.labels.astype(np.uint8).tobytes())
        if ws.phases is not None:
            fh.write(ws.phases.astype(np.uint8).tobytes())


def load_windows(path) -> WindowSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SVWS window file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported SVWS version {version}")
    count, channels, length, fs, flags = struct.unpack_from("<QQQdB", data, 8)
    pos = 8 + struct.calcsize("<QQQdB")
    total = count * channels * length
    expected = pos + 8 * count + 8 * total + count * (bool(flags & 1) + bool(flags & 2))
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} does not match header (expected {expected})")
    starts = np.frombuffer(data, "<f8", count, pos).astype(float)
    pos += 8 * count
    windows = np.frombuffer(data, "<f8", total, pos).astype(float).reshape(count, channels, length)
    pos += 8 * total
    labels = phases = None
    if flags & 1:
        labels = np.frombuffer(data, np.uint8, count, pos).copy()
        pos += count
    if flags & 2:
        phases = np.frombuffer(data, np.uint8, count, pos).copy()
    return WindowSet(windows, starts, fs, labels, phases)

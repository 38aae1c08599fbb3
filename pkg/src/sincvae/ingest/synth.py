"""Seeded synthetic EEG-like recordings with annotated oscillatory bursts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..signal import TimeSeriesRecording
from .text import SeizureAnnotation


@dataclass
class SynthSpec:
    duration_s: float = 600.0
    channels: int = 1
    fs: float = 128.0
    tracks: int = 1
    # (low_hz, high_hz, relative_amplitude) band-limited noise components
    background_bands: tuple = ((0.5, 4.0, 1.0), (4.0, 8.0, 0.6), (8.0, 13.0, 0.8), (13.0, 30.0, 0.3))
    # (frequency_hz, relative_amplitude) sinusoids with random-walk phase
    sinusoids: tuple = ((1.5, 0.5), (10.0, 0.4))
    phase_diffusion: float = 0.5  # rad / sqrt(s); 0 gives fixed-phase tones
    burst_count: int = 0
    burst_duration_s: float = 5.0
    burst_gain: float = 3.0
    burst_band: tuple = (3.0, 7.0)
    burst_intervals: list | None = None  # explicit (start_s, end_s); overrides random placement
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0 or self.channels < 1 or self.fs <= 0 or self.tracks < 1:
            raise ValueError("duration, channels, fs and tracks must be positive")
        if self.burst_gain <= 1:
            raise ValueError("burst_gain must exceed 1")
        lo, hi = self.burst_band
        if not 0 < lo < hi < self.fs / 2:
            raise ValueError(f"burst band {self.burst_band} must lie inside (0, {self.fs / 2}) Hz")
        for lo, hi, _ in self.background_bands:
            if not 0 <= lo < hi <= self.fs / 2:
                raise ValueError(f"background band ({lo}, {hi}) must lie inside [0, {self.fs / 2}] Hz")
        if self.burst_intervals is not None:
            iv = sorted(tuple(map(float, p)) for p in self.burst_intervals)
            for a, b in iv:
                if not 0 <= a < b <= self.duration_s:
                    raise ValueError(f"burst interval ({a}, {b}) outside [0, {self.duration_s}]")
            for (_, b0), (a1, _) in zip(iv, iv[1:]):
                if a1 < b0:
                    raise ValueError("burst intervals overlap")
            self.burst_intervals = iv


def band_noise(rng, n, fs, lo, hi):
    """Unit-RMS Gaussian noise restricted to ``[lo, hi]`` Hz by an FFT mask."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def place_bursts(rng, duration_s, count, length_s):
    """Non-overlapping intervals starting on whole seconds, one per ``2 * length`` slot."""
    if count == 0:
        return []
    length = int(np.ceil(length_s))
    slots = int(duration_s) // (2 * length)
    if count > slots:
        raise ValueError(f"{count} bursts of {length} s do not fit in {duration_s} s")
    chosen = np.sort(rng.choice(slots, size=count, replace=False))
    # an offset of at most ``length`` keeps each burst inside its slot
    offsets = rng.integers(0, length + 1, size=count)
    return [(float(s * 2 * length + o), float(s * 2 * length + o + length_s)) for s, o in zip(chosen, offsets)]


def _track(spec: SynthSpec, rng, track_id):
    n = int(round(spec.duration_s * spec.fs))
    t = np.arange(n) / spec.fs
    data = np.zeros((spec.channels, n))
    for c in range(spec.channels):
        for lo, hi, amp in spec.background_bands:
            data[c] += amp * band_noise(rng, n, spec.fs, lo, hi)
        for f, amp in spec.sinusoids:
            walk = np.cumsum(rng.standard_normal(n)) * spec.phase_diffusion / np.sqrt(spec.fs)
            data[c] += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi) + walk)
    intervals = (spec.burst_intervals if spec.burst_intervals is not None
                 else place_bursts(rng, spec.duration_s, spec.burst_count, spec.burst_duration_s))
    bg_rms = np.sqrt(np.mean(data * data, axis=1))
    # independent oscillation with RMS bg*sqrt(g^2 - 1) lifts in-burst RMS to g*bg
    osc_scale = bg_rms * np.sqrt(spec.burst_gain ** 2 - 1.0)
    for a, b in intervals:
        i0, i1 = int(round(a * spec.fs)), int(round(b * spec.fs))
        if i1 <= i0:
            continue
        for c in range(spec.channels):
            osc = band_noise(rng, i1 - i0, spec.fs, *spec.burst_band)
            data[c, i0:i1] += osc_scale[c] * osc
    names = [f"ch{c}" for c in range(spec.channels)]
    return TimeSeriesRecording(data, spec.fs, names, track_id), SeizureAnnotation(track_id, list(intervals))


def synth_generate(spec: SynthSpec):
    """(recordings, annotations), one of each per track; deterministic per seed."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.tracks)
    recs, anns = [], []
    for k, child in enumerate(children):
        rec, ann = _track(spec, np.random.default_rng(child), f"synth{k:02d}")
        recs.append(rec)
        anns.append(ann)
    return recs, anns


def label_windows(start_times, window_seconds, intervals):
    """1 where a window overlaps any interval by at least half its length."""
    starts = np.asarray(start_times, dtype=float)
    labels = np.zeros(len(starts), dtype=np.uint8)
    for a, b in intervals:
        overlap = np.clip(np.minimum(starts + window_seconds, b) - np.maximum(starts, a), 0, None)
        labels[overlap >= 0.5 * window_seconds] = 1
    return labels


__all__ = ["SynthSpec", "band_noise", "label_windows", "place_bursts", "synth_generate"]

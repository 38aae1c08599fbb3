"""Plain-text loaders: Bonn segments and seizure-annotation CSV."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from ..signal import TimeSeriesRecording

BONN_FS = 173.61


def read_bonn_file(path, fs=BONN_FS):
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(int(text))
            except ValueError:
                try:
                    values.append(float(text))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: not a number: {text[:40]!r}") from None
    if not values:
        raise ValueError(f"{path}: empty segment file")
    data = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite sample")
    name = os.path.splitext(os.path.basename(path))[0]
    return TimeSeriesRecording(data[None, :], fs, ["EEG"], name)


def read_bonn(directory, fs=BONN_FS):
    """One recording per file in ``directory``, sorted by file name."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"{directory}: not a directory")
    names = sorted(n for n in os.listdir(directory)
                   if not n.startswith(".") and os.path.isfile(os.path.join(directory, n)))
    if not names:
        raise ValueError(f"{directory}: no segment files")
    return [read_bonn_file(os.path.join(directory, n), fs) for n in names]


@dataclass
class SeizureAnnotation:
    track_id: str
    intervals: list = field(default_factory=list)  # sorted (start_s, end_s)


def read_annotations(path):
    """``track_id,start_s,end_s`` rows grouped per track (tracks in first-seen order)."""
    tracks = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "track_id":
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected track_id,start_s,end_s")
            track = row[0].strip()
            try:
                start, end = float(row[1]), float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric interval") from None
            if not (np.isfinite(start) and np.isfinite(end)) or start < 0 or end <= start:
                raise ValueError(f"{path}:{lineno}: invalid interval ({start}, {end})")
            tracks.setdefault(track, []).append((start, end, lineno))
    out = []
    for track, rows in tracks.items():
        rows.sort()
        for (a0, b0, l0), (a1, b1, l1) in zip(rows, rows[1:]):
            if a1 < b0:
                raise ValueError(f"{path}:{l1}: interval ({a1}, {b1}) overlaps line {l0} on track {track}")
        out.append(SeizureAnnotation(track, [(a, b) for a, b, _ in rows]))
    return out


def write_annotations(annotations, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "start_s", "end_s"])
        for ann in annotations:
            for a, b in ann.intervals:
                w.writerow([ann.track_id, repr(float(a)), repr(float(b))])

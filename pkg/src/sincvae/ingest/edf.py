"""EDF (European Data Format) reader and writer, 16-bit continuous files only."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..signal import TimeSeriesRecording

log = logging.getLogger(__name__)

ANNOTATION_LABEL = "EDF Annotations"

# (name, width) of the per-signal header fields, stored field-major on disk
_SIGNAL_FIELDS = (
    ("label", 16), ("transducer", 80), ("physical_dimension", 8),
    ("physical_min", 8), ("physical_max", 8), ("digital_min", 8), ("digital_max", 8),
    ("prefiltering", 80), ("samples_per_record", 8), ("reserved", 32),
)


class EdfError(ValueError):
    """Base class for EDF decoding problems."""


class EdfTruncatedError(EdfError):
    pass


class EdfHeaderError(EdfError):
    pass


class EdfUnsupportedError(EdfError):
    pass


@dataclass
class EdfSignal:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int = -32768
    digital_max: int = 32767
    samples_per_record: int = 1
    transducer: str = ""
    physical_dimension: str = "uV"
    prefiltering: str = ""
    reserved: str = ""

    @property
    def gain(self):
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital):
        return (np.asarray(digital, dtype=float) - self.digital_min) * self.gain + self.physical_min

    def to_digital(self, physical):
        d = np.rint((np.asarray(physical, dtype=float) - self.physical_min) / self.gain + self.digital_min)
        return np.clip(d, self.digital_min, self.digital_max).astype("<i2")


@dataclass
class EdfHeader:
    version: str = "0"
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.00"
    start_time: str = "00.00.00"
    reserved: str = ""
    record_count: int = 0
    record_duration: float = 1.0
    signals: list = field(default_factory=list)

    @property
    def signal_count(self):
        return len(self.signals)

    @property
    def header_bytes(self):
        return 256 + 256 * self.signal_count

    @property
    def record_samples(self):
        return sum(s.samples_per_record for s in self.signals)

    def sampling_rate(self, i):
        return self.signals[i].samples_per_record / self.record_duration

    def validate(self):
        if self.record_count <= 0:
            raise EdfHeaderError(f"record count {self.record_count} unsupported (must be > 0)")
        if not self.record_duration > 0:
            raise EdfHeaderError(f"record duration {self.record_duration} must be positive")
        for s in self.signals:
            if s.digital_max <= s.digital_min:
                raise EdfHeaderError(f"signal {s.label!r}: digital max <= digital min")
            if s.physical_max == s.physical_min:
                raise EdfHeaderError(f"signal {s.label!r}: physical max == physical min")
            if s.digital_min < -32768 or s.digital_max > 32767:
                raise EdfHeaderError(f"signal {s.label!r}: digital range exceeds 16 bits")
            if s.samples_per_record <= 0:
                raise EdfHeaderError(f"signal {s.label!r}: samples per record must be positive")

    def to_bytes(self):
        self.validate()
        out = [
            _field(self.version, 8), _field(self.patient_id, 80), _field(self.recording_id, 80),
            _field(self.start_date, 8), _field(self.start_time, 8),
            _field(str(self.header_bytes), 8), _field(self.reserved, 44),
            _field(str(self.record_count), 8), _field(_fmt_num(self.record_duration, 8), 8),
            _field(str(self.signal_count), 4),
        ]
        for name, width in _SIGNAL_FIELDS:
            for s in self.signals:
                v = getattr(s, name)
                if name in ("physical_min", "physical_max", "digital_min", "digital_max"):
                    v = _fmt_num(v, width)
                out.append(_field(str(v), width))
        raw = b"".join(out)
        assert len(raw) == self.header_bytes
        return raw

    def describe(self):
        lines = [
            f"version: {self.version}",
            f"patient: {self.patient_id}",
            f"recording: {self.recording_id}",
            f"start: {self.start_date} {self.start_time}",
            f"header bytes: {self.header_bytes}",
            f"records: {self.record_count} x {self.record_duration:g} s",
            f"signals: {self.signal_count}",
        ]
        for i, s in enumerate(self.signals):
            lines.append(
                f"  [{i}] {s.label!r} {self.sampling_rate(i):g} Hz "
                f"phys [{s.physical_min:g}, {s.physical_max:g}] {s.physical_dimension} "
                f"dig [{s.digital_min}, {s.digital_max}]")
        return "\n".join(lines)


def _field(text, width):
    raw = text.encode("ascii", errors="replace")
    if len(raw) > width:
        raise EdfHeaderError(f"header value {text!r} longer than {width} characters")
    return raw.ljust(width, b" ")


def _fmt_num(v, width=8):
    """Shortest exact-ish text for ``v`` in ``width`` characters."""
    if float(v).is_integer() and abs(v) < 10 ** (width - 1):
        return str(int(v))
    for digits in range(width, 0, -1):
        s = f"{v:.{digits}g}"
        if "e" in s:
            continue
        if len(s) <= width:
            return s
    raise EdfHeaderError(f"value {v!r} does not fit in {width} characters")


def _outward(v, width, up):
    """Format ``v`` in ``width`` chars, rounding away from the data so the bound still covers it."""
    for decimals in range(width, -1, -1):
        scale = 10.0 ** decimals
        r = (math.ceil(v * scale) if up else math.floor(v * scale)) / scale
        try:
            bound = float(_fmt_num(r, width))
        except EdfHeaderError:
            continue
        if (bound >= v) if up else (bound <= v):
            return bound
    raise EdfHeaderError(f"bound {v!r} does not fit in {width} characters")


def _text(raw, what):
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError:
        raise EdfHeaderError(f"non-ASCII bytes in {what}") from None


def _number(raw, what, kind=float):
    text = _text(raw, what)
    try:
        return kind(text) if kind is float else int(float(text))
    except ValueError:
        raise EdfHeaderError(f"{what}: cannot parse {text!r}") from None


def parse_header(raw: bytes, file_size=None) -> EdfHeader:
    if len(raw) < 256:
        raise EdfTruncatedError(f"file holds {len(raw)} bytes, fixed header needs 256")
    h = EdfHeader(
        version=_text(raw[0:8], "version"),
        patient_id=_text(raw[8:88], "patient id"),
        recording_id=_text(raw[88:168], "recording id"),
        start_date=_text(raw[168:176], "start date"),
        start_time=_text(raw[176:184], "start time"),
        reserved=_text(raw[192:236], "reserved"),
        record_count=_number(raw[236:244], "record count", int),
        record_duration=_number(raw[244:252], "record duration"),
    )
    header_bytes = _number(raw[184:192], "header byte count", int)
    ns = _number(raw[252:256], "signal count", int)
    if ns <= 0:
        raise EdfHeaderError(f"signal count {ns} must be positive")
    if header_bytes != 256 + 256 * ns:
        raise EdfHeaderError(f"header byte count {header_bytes} != 256 + 256 x {ns}")
    if h.reserved.startswith("EDF+D"):
        raise EdfUnsupportedError("discontinuous EDF+ recordings are not supported")
    if h.record_count == -1:
        raise EdfUnsupportedError("record count -1 (unknown length) is not supported")
    if len(raw) < header_bytes:
        raise EdfTruncatedError(f"file holds {len(raw)} bytes, header declares {header_bytes}")
    values = {}
    pos = 256
    for name, width in _SIGNAL_FIELDS:
        col = []
        for i in range(ns):
            chunk = raw[pos:pos + width]
            what = f"signal {i} {name.replace('_', ' ')}"
            if name in ("physical_min", "physical_max"):
                col.append(_number(chunk, what))
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                col.append(_number(chunk, what, int))
            else:
                col.append(_text(chunk, what))
            pos += width
        values[name] = col
    h.signals = [EdfSignal(**{name: values[name][i] for name, _ in _SIGNAL_FIELDS}) for i in range(ns)]
    h.validate()
    if file_size is not None:
        expected = header_bytes + 2 * h.record_samples * h.record_count
        if file_size < expected:
            raise EdfTruncatedError(
                f"file holds {file_size} bytes, header declares {expected} "
                f"({h.record_count} records)")
        if file_size > expected:
            raise EdfHeaderError(f"file holds {file_size} bytes, header declares {expected}")
    return h


def read_edf_header(path) -> EdfHeader:
    with open(path, "rb") as fh:
        head = fh.read(256)
        if len(head) == 256:
            try:
                ns = int(head[252:256].decode("ascii").strip())
            except ValueError:
                ns = 0
            head += fh.read(256 * max(ns, 0))
    return parse_header(head, os.path.getsize(path))


def read_edf(path, channels=None) -> TimeSeriesRecording:
    """Decode ``path`` to physical units.

    ``channels`` is an optional list of labels (order kept). All selected
    signals must share one sampling rate. EDF+ annotation signals are
    skipped.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    h = read_edf_header(path)
    labels = [s.label for s in h.signals]
    if channels is None:
        idx = [i for i, lab in enumerate(labels) if lab != ANNOTATION_LABEL]
        if len(idx) < len(labels):
            log.warning("%s: skipping EDF+ annotation signal", path)
    else:
        idx = []
        for want in channels:
            matches = [i for i, lab in enumerate(labels) if lab == want]
            if not matches:
                raise EdfHeaderError(f"{path}: channel {want!r} not found")
            idx.append(matches[0])
    if not idx:
        raise EdfHeaderError(f"{path}: no data signals")
    rates = {h.signals[i].samples_per_record for i in idx}
    if len(rates) != 1:
        raise EdfUnsupportedError(f"{path}: selected signals have different sampling rates")
    data = np.frombuffer(raw, dtype="<i2", count=h.record_samples * h.record_count, offset=h.header_bytes)
    data = data.reshape(h.record_count, h.record_samples)
    offsets = np.cumsum([0] + [s.samples_per_record for s in h.signals])
    out = np.empty((len(idx), h.record_count * h.signals[idx[0]].samples_per_record))
    for row, i in enumerate(idx):
        s = h.signals[i]
        out[row] = s.to_physical(data[:, offsets[i]:offsets[i + 1]].ravel())
    return TimeSeriesRecording(out, h.sampling_rate(idx[0]), [labels[i] for i in idx],
                               os.path.splitext(os.path.basename(path))[0])


def header_for(rec: TimeSeriesRecording, record_duration=1.0, physical_range=None,
               patient_id="X", recording_id="sincvae") -> EdfHeader:
    """Build a header for ``rec``; physical bounds default to the data range."""
    spr = rec.fs * record_duration
    if abs(spr - round(spr)) > 1e-9 * max(1.0, spr) or round(spr) < 1:
        raise ValueError(f"fs={rec.fs} x record duration {record_duration} is not a whole sample count")
    spr = int(round(spr))
    if rec.n_samples % spr:
        raise ValueError(f"{rec.n_samples} samples is not a whole number of {spr}-sample records")
    signals = []
    for c, name in enumerate(rec.channel_names):
        if physical_range is not None:
            lo, hi = physical_range
        else:
            lo, hi = float(rec.data[c].min()), float(rec.data[c].max())
            if hi == lo:
                lo, hi = lo - 1.0, hi + 1.0
        signals.append(EdfSignal(name[:16], _outward(lo, 8, False), _outward(hi, 8, True),
                                 samples_per_record=spr))
    return EdfHeader(patient_id=patient_id, recording_id=recording_id,
                     record_count=rec.n_samples // spr, record_duration=record_duration,
                     signals=signals)


def write_edf(rec: TimeSeriesRecording, path, header: EdfHeader | None = None, **header_kwargs):
    """Write ``rec`` as 16-bit EDF; values outside the physical range are rejected."""
    h = header if header is not None else header_for(rec, **header_kwargs)
    if h.signal_count != rec.n_channels:
        raise ValueError(f"header has {h.signal_count} signals, recording has {rec.n_channels}")
    spr = {s.samples_per_record for s in h.signals}
    if len(spr) != 1:
        raise ValueError("writer supports a single sampling rate")
    spr = spr.pop()
    if h.record_count * spr != rec.n_samples:
        raise ValueError(f"header declares {h.record_count * spr} samples, recording has {rec.n_samples}")
    if not np.all(np.isfinite(rec.data)):
        raise ValueError("recording contains non-finite values")
    digital = []
    for c, s in enumerate(h.signals):
        x = rec.data[c]
        lo, hi = min(s.physical_min, s.physical_max), max(s.physical_min, s.physical_max)
        tol = 1e-9 * (hi - lo)  # decoded extremes may sit an ulp outside
        if x.min() < lo - tol or x.max() > hi + tol:
            raise ValueError(f"channel {s.label!r}: values outside physical range [{lo}, {hi}]")
        digital.append(s.to_digital(x).reshape(h.record_count, spr))
    body = np.concatenate(digital, axis=1).astype("<i2")
    with open(path, "wb") as fh:
        fh.write(h.to_bytes())
        fh.write(body.tobytes())
    return h

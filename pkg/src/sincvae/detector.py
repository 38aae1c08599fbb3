"""Threshold-based classification of reconstruction scores, metrics and
per-phase anomaly rates around annotated seizures."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

PERCENTILE_METHODS = {"linear": "linear", "nearest_rank": "inverted_cdf"}


@dataclass
class ThresholdPolicy:
    kind: str = "percentile"  # "max" or "percentile"
    p: float = 95.0
    method: str = "linear"
    value: float | None = None

    def __post_init__(self):
        if self.kind not in ("max", "percentile"):
            raise ValueError(f"unknown threshold policy {self.kind!r}")
        if self.kind == "percentile" and not 0 < self.p <= 100:
            raise ValueError("percentile must be in (0, 100]")
        if self.method not in PERCENTILE_METHODS:
            raise ValueError(f"percentile method must be one of {sorted(PERCENTILE_METHODS)}")

    @classmethod
    def parse(cls, text):
        """``"max"`` or ``"percentile:95"`` (optionally ``percentile:95:nearest_rank``)."""
        parts = text.strip().split(":")
        if parts[0] == "max" and len(parts) == 1:
            return cls("max")
        if parts[0] == "percentile" and len(parts) in (2, 3):
            return cls("percentile", float(parts[1]), parts[2] if len(parts) == 3 else "linear")
        raise ValueError(f"bad threshold policy {text!r}; use 'max' or 'percentile:<p>'")

    @property
    def label(self):
        return "max" if self.kind == "max" else f"percentile:{self.p:g}"


def resolve_threshold(validation_scores, policy: ThresholdPolicy):
    """Maximum or percentile of the validation scores."""
    s = np.asarray(validation_scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("cannot resolve a threshold from an empty score set")
    if policy.kind == "max":
        t = float(s.max())
    else:
        t = float(np.percentile(s, policy.p, method=PERCENTILE_METHODS[policy.method]))
    policy.value = t
    return t


def classify(scores, t):
    """1 (anomalous) where ``score > t``; ties go to normal."""
    return (np.asarray(scores, dtype=float) > t).astype(np.uint8)


@dataclass
class DetectionReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    undefined: list = field(default_factory=list)
    threshold: float | None = None
    policy: str | None = None
    scores: np.ndarray | None = None
    predictions: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def count(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def false_positive_rate(self):
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    def summary(self):
        d = asdict(self)
        for k in ("scores", "predictions", "labels"):
            d.pop(k)
        d["false_positive_rate"] = self.false_positive_rate
        return d

    def to_json(self, path=None):
        text = json.dumps(self.summary(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def confusion_table(self):
        rows = [
            ("", "pred normal", "pred seizure"),
            ("true normal", str(self.tn), str(self.fp)),
            ("true seizure", str(self.fn), str(self.tp)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"precision={self.precision:.4f} recall={self.recall:.4f} F1={self.f1:.4f}")
        if self.threshold is not None:
            lines.append(f"threshold={self.threshold!r} ({self.policy})")
        return "\n".join(lines)


def compute_metrics(predictions, labels, scores=None, threshold=None, policy=None) -> DetectionReport:
    """Confusion counts and precision/recall/F1 with seizure as positive.

    Zero denominators give 0 and are listed in ``undefined``.
    """
    pred = np.asarray(predictions).astype(bool).ravel()
    lab = np.asarray(labels).astype(bool).ravel()
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions but {lab.size} labels")
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    tn = int(np.sum(~pred & ~lab))
    fn = int(np.sum(~pred & lab))
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return DetectionReport(
        tp, fp, tn, fn, precision, recall, f1, undefined, threshold, policy,
        None if scores is None else np.asarray(scores, dtype=float),
        pred.astype(np.uint8), lab.astype(np.uint8))


def evaluate(scores, labels, validation_scores, policy: ThresholdPolicy) -> DetectionReport:
    t = resolve_threshold(validation_scores, policy)
    return compute_metrics(classify(scores, t), labels, scores, t, policy.label)


# phase analysis -------------------------------------------------------------

INTERICTAL, PREICTAL, ICTAL, POSTICTAL = 0, 1, 2, 3
PHASE_NAMES = ("interictal", "preictal", "ictal", "postictal")


def _validate_intervals(intervals):
    iv = sorted((float(a), float(b)) for a, b in intervals)
    for a, b in iv:
        if not 0 <= a < b:
            raise ValueError(f"invalid seizure interval ({a}, {b})")
    for (a0, b0), (a1, b1) in zip(iv, iv[1:]):
        if a1 < b0:
            raise ValueError(f"seizure intervals ({a0}, {b0}) and ({a1}, {b1}) overlap")
    return iv


def tag_phases(n_seconds, intervals, horizon_pre=900.0, horizon_post=900.0):
    """Phase tag per second ``s`` (covering ``[s, s + 1)``).

    Precedence: ictal, then preictal (of the next seizure), then postictal.
    """
    iv = _validate_intervals(intervals)
    s = np.arange(n_seconds, dtype=float)
    tags = np.full(n_seconds, INTERICTAL, dtype=np.uint8)
    post = np.zeros(n_seconds, bool)
    pre = np.zeros(n_seconds, bool)
    ictal = np.zeros(n_seconds, bool)
    for a, b in iv:
        ictal |= (s >= a) & (s < b)
        pre |= (s >= a - horizon_pre) & (s < a)
        post |= (s >= b) & (s < b + horizon_post)
    tags[post] = POSTICTAL
    tags[pre] = PREICTAL
    tags[ictal] = ICTAL
    return tags


@dataclass
class PhaseRateReport:
    horizon_pre: float
    horizon_post: float
    per_track: dict  # track -> {phase: percent or None}
    per_subject: dict  # subject -> {phase: {"mean", "std", "tracks"}}
    counts: dict  # track -> {phase: seconds}

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def table(self):
        head = ["subject"] + [p for p in PHASE_NAMES]
        rows = [head]
        for subj, stats in sorted(self.per_subject.items()):
            row = [str(subj)]
            for p in PHASE_NAMES:
                st = stats[p]
                row.append("n/a" if st["mean"] is None else f"{st['mean']:.2f} ± {st['std']:.2f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append(f"horizons: preictal {self.horizon_pre:g} s, postictal {self.horizon_post:g} s")
        return "\n".join(lines)


def phase_rates(tracks, horizon_pre=900.0, horizon_post=900.0) -> PhaseRateReport:
    """Percentage of flagged seconds per phase, per track and per subject.

    ``tracks`` maps ``track_id -> (subject, per_second_predictions,
    seizure_intervals)``. Subject statistics average over tracks that contain
    at least one seizure (population std).
    """
    per_track, counts = {}, {}
    by_subject = {}
    for track, (subject, preds, intervals) in tracks.items():
        preds = np.asarray(preds).astype(bool)
        tags = tag_phases(len(preds), intervals, horizon_pre, horizon_post)
        rates, cnt = {}, {}
        for code, name in enumerate(PHASE_NAMES):
            mask = tags == code
            cnt[name] = int(mask.sum())
            rates[name] = 100.0 * float(preds[mask].mean()) if mask.any() else None
        per_track[track] = rates
        counts[track] = cnt
        if len(intervals):
            by_subject.setdefault(subject, []).append(rates)
    per_subject = {}
    for subject, rows in by_subject.items():
        stats = {}
        for name in PHASE_NAMES:
            vals = np.array([r[name] for r in rows if r[name] is not None])
            stats[name] = {
                "mean": float(vals.mean()) if vals.size else None,
                "std": float(vals.std()) if vals.size else None,
                "tracks": int(vals.size),
            }
        per_subject[subject] = stats
    return PhaseRateReport(horizon_pre, horizon_post, per_track, per_subject, counts)


def write_trace_csv(path, mse, predictions, phases=None):
    """Per-second trace ``second,mse,prediction,phase``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["second", "mse", "prediction", "phase"])
        for i, (m, p) in enumerate(zip(mse, predictions)):
            phase = PHASE_NAMES[phases[i]] if phases is not None else ""
            w.writerow([i, repr(float(m)), int(p), phase])

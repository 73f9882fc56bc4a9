"""Session metrics and the JSON/CSV evaluation report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

SCHEMA_VERSION = 1


class ReportError(ValueError):
    pass


def round_half_up(x, places=2):
    """Round using the decimal representation of ``x`` (so 92.005 -> 92.01)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def accuracy(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if y.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.count_nonzero(p == y)) / y.size


def average_accuracy(session_accuracies):
    acc = [float(a) for a in session_accuracies]
    if not acc:
        raise ValueError("need at least one session accuracy")
    return sum(acc) / len(acc)


def performance_drop(session_accuracies):
    acc = [float(a) for a in session_accuracies]
    if not acc:
        raise ValueError("need at least one session accuracy")
    return acc[0] - acc[-1]


def confusion_matrix(predictions, labels, n_classes):
    """Counts with true class on rows and predicted class on columns."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def row_normalized(cm):
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class SessionResult:
    session_id: int
    accuracy: float
    per_class: dict
    confusion: np.ndarray
    track: str = "softmax"

    @classmethod
    def from_predictions(cls, session_id, predictions, labels, n_classes, track="softmax"):
        cm = confusion_matrix(predictions, labels, n_classes)
        per_class = {}
        for c in range(n_classes):
            total = cm[c].sum()
            if total:
                per_class[c] = 100.0 * cm[c, c] / total
        return cls(session_id, accuracy(predictions, labels), per_class, cm, track)

    def subset_accuracy(self, classes):
        """Accuracy over test samples whose true class is in ``classes``."""
        rows = self.confusion[list(classes)]
        total = rows.sum()
        if total == 0:
            raise ValueError("no test samples for the requested classes")
        return 100.0 * sum(self.confusion[c, c] for c in classes) / total

    def check(self):
        cm = self.confusion
        total = cm.sum()
        if total and abs(100.0 * np.trace(cm) / total - self.accuracy) > 1e-9:
            raise ReportError(f"session {self.session_id}: confusion trace disagrees with accuracy")


@dataclass
class Track:
    name: str
    sessions: list = field(default_factory=list)

    @property
    def accuracies(self):
        return [s.accuracy for s in self.sessions]

    @property
    def aa(self):
        return average_accuracy(self.accuracies)

    @property
    def pd(self):
        return performance_drop(self.accuracies)


@dataclass
class EvalReport:
    seed: int
    config: dict
    tracks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    timestamps: dict | None = None

    def track(self, name):
        for t in self.tracks:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self, include_timestamps=True):
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "config": self.config,
            "tracks": [
                {
                    "name": t.name,
                    "sessions": [
                        {
                            "id": s.session_id,
                            "accuracy": s.accuracy,
                            "per_class": {str(k): v for k, v in s.per_class.items()},
                            "confusion": s.confusion.tolist(),
                            "confusion_normalized": row_normalized(s.confusion).tolist(),
                        }
                        for s in t.sessions
                    ],
                    "aa": round_half_up(t.aa) if t.sessions else None,
                    "pd": round_half_up(t.pd) if t.sessions else None,
                }
                for t in self.tracks
            ],
            "warnings": list(self.warnings),
        }
        if include_timestamps and self.timestamps is not None:
            d["timestamps"] = self.timestamps
        return d

    def payload(self):
        """Canonical JSON text without timestamps."""
        return json.dumps(self.to_dict(include_timestamps=False), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        for key in ("schema_version", "seed", "config", "tracks", "warnings"):
            if key not in d:
                raise ReportError(f"report is missing field {key!r}")
        if d["schema_version"] != SCHEMA_VERSION:
            raise ReportError(f"unsupported schema_version {d['schema_version']}")
        tracks = []
        for t in d["tracks"]:
            sessions = []
            for s in t["sessions"]:
                sr = SessionResult(int(s["id"]), float(s["accuracy"]),
                                   {int(k): float(v) for k, v in s["per_class"].items()},
                                   np.asarray(s["confusion"], dtype=np.int64), t["name"])
                sr.check()
                sessions.append(sr)
            track = Track(t["name"], sessions)
            if sessions:
                if abs(round_half_up(track.aa) - float(t["aa"])) > 1e-9:
                    raise ReportError(f"track {t['name']}: AA {t['aa']} inconsistent with sessions ({track.aa:.4f})")
                if abs(round_half_up(track.pd) - float(t["pd"])) > 1e-9:
                    raise ReportError(f"track {t['name']}: PD {t['pd']} inconsistent with sessions ({track.pd:.4f})")
            tracks.append(track)
        return cls(d["seed"], d["config"], tracks, list(d["warnings"]), d.get("timestamps"))


def emit_report(report, path, fmt="json"):
    if fmt == "json":
        text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ReportError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from exc
    return EvalReport.from_dict(d)


def report_csv(report):
    """One row per (track, session) plus AA and PD rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["track", "session", "accuracy"])
    for t in report.tracks:
        for s in t.sessions:
            w.writerow([t.name, s.session_id, f"{round_half_up(s.accuracy):.2f}"])
        if t.sessions:
            w.writerow([t.name, "AA", f"{round_half_up(t.aa):.2f}"])
            w.writerow([t.name, "PD", f"{round_half_up(t.pd):.2f}"])
    return buf.getvalue()


def confusion_csv(result):
    """Plot-ready long-format CSV of one session's confusion matrix."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true", "predicted", "count", "fraction"])
    norm = row_normalized(result.confusion)
    n = result.confusion.shape[0]
    for i in range(n):
        for j in range(n):
            w.writerow([i, j, int(result.confusion[i, j]), repr(float(norm[i, j]))])
    return buf.getvalue()

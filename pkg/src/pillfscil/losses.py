"""Loss functions with analytic gradients, and EMA class centers.

Per-sample functions return :class:`LossValueAndGrads`. The ``*_batch``
variants average over a row batch and return per-row gradients already
divided by the batch size, ready for backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidInputError, as_vector, log_softmax, softmax


class ProtocolError(RuntimeError):
    """An operation was invoked in a state where it is undefined."""


@dataclass
class LossValueAndGrads:
    value: float
    grads: dict = field(default_factory=dict)


def _check_label(label, n):
    if not 0 <= int(label) < n:
        raise InvalidInputError(f"label {label} out of range for {n} classes")


def ce_loss(logits, label):
    z = as_vector(logits, "logits")
    _check_label(label, z.size)
    logp = log_softmax(z)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return LossValueAndGrads(float(-logp[label]), {"logits": grad})


def ce_loss_batch(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidInputError(f"labels out of range for {c} classes")
    logp = log_softmax(z)
    rows = np.arange(n)
    value = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return value, grad / n


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0.0 else np.zeros_like(v)


def triplet_loss(anchor, positive, negative, margin):
    """max(0, m + |a - p| - |a - n|) with subgradients for all three inputs."""
    a = as_vector(anchor, "anchor")
    p = as_vector(positive, "positive")
    n = as_vector(negative, "negative")
    if not (a.shape == p.shape == n.shape):
        raise InvalidInputError("anchor, positive and negative must share a dimension")
    if margin < 0:
        raise InvalidInputError("margin must be non-negative")
    arg = margin + np.linalg.norm(a - p) - np.linalg.norm(a - n)
    zero = np.zeros_like(a)
    if arg <= 0.0:
        return LossValueAndGrads(0.0, {"anchor": zero, "positive": zero.copy(), "negative": zero.copy()})
    up = _unit(a - p)
    un = _unit(a - n)
    return LossValueAndGrads(float(arg), {"anchor": up - un, "positive": -up, "negative": un})


class CenterBank:
    """Per-class feature centers maintained by exponential moving average."""

    def __init__(self, n_classes, dim, rate=0.1):
        if not 0.0 < rate <= 1.0:
            raise InvalidInputError(f"EMA rate must be in (0, 1], got {rate}")
        self.centers = np.zeros((n_classes, dim))
        self.initialized = np.zeros(n_classes, dtype=bool)
        self.rate = rate

    @property
    def n_classes(self):
        return self.centers.shape[0]

    def update(self, features, labels):
        """Fold one batch into the centers; returns self."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise InvalidInputError("label outside the center bank's label space")
        for c in np.unique(labels):
            mean = features[labels == c].mean(axis=0)
            if self.initialized[c]:
                self.centers[c] = (1.0 - self.rate) * self.centers[c] + self.rate * mean
            else:
                self.centers[c] = mean
                self.initialized[c] = True
        return self

    def nearest_other(self, y):
        """(index, distance) of the closest initialized center to center ``y``.

        Ties go to the lowest class index.
        """
        others = np.flatnonzero(self.initialized)
        others = others[others != y]
        if others.size == 0:
            raise ProtocolError("CT loss needs at least two initialized centers")
        d = np.linalg.norm(self.centers[others] - self.centers[y], axis=1)
        k = int(np.argmin(d))
        return int(others[k]), float(d[k])


def update_centers(centers, features, labels):
    return centers.update(features, labels)


def ct_loss(f, label, centers, margin):
    """Center-triplet hinge; the gradient flows to the feature only."""
    f = as_vector(f, "f")
    if margin < 0:
        raise InvalidInputError("margin must be non-negative")
    if not centers.initialized[label]:
        raise ProtocolError(f"center of class {label} is not initialized")
    _, gap = centers.nearest_other(label)
    diff = f - centers.centers[label]
    arg = margin + np.linalg.norm(diff) - gap
    if arg <= 0.0:
        return LossValueAndGrads(0.0, {"f": np.zeros_like(f)})
    return LossValueAndGrads(float(arg), {"f": _unit(diff)})


def ct_loss_batch(features, labels, centers, margin):
    """Mean CT loss over a batch. Rows whose class has no center contribute 0."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    grad = np.zeros_like(features)
    if np.count_nonzero(centers.initialized) < 2:
        raise ProtocolError("CT loss needs at least two initialized centers")
    classes = np.unique(labels)
    gaps = {}
    for c in classes:
        if centers.initialized[c]:
            gaps[int(c)] = centers.nearest_other(int(c))[1]
    total = 0.0
    for c, gap in gaps.items():
        rows = labels == c
        diff = features[rows] - centers.centers[c]
        dist = np.linalg.norm(diff, axis=1)
        arg = margin + dist - gap
        active = arg > 0.0
        total += float(arg[active].sum())
        safe = np.where(dist > 0.0, dist, 1.0)[:, None]
        g = np.where((active & (dist > 0.0))[:, None], diff / safe, 0.0)
        grad[rows] = g
    return total / n, grad / n


def total_base_loss(cls_loss, ct_loss_value, weight):
    if weight < 0:
        raise InvalidInputError("CT weight must be non-negative")
    return cls_loss + weight * ct_loss_value


def kd_loss(student_logits, teacher_logits, temperature, reverse=False):
    """KL divergence between temperature-softened teacher and student outputs.

    Default direction is KL(teacher || student). ``reverse=True`` gives
    KL(student || teacher). The gradient is w.r.t. the student logits only,
    and there is no T^2 rescaling.
    """
    s = as_vector(student_logits, "student_logits")
    t = as_vector(teacher_logits, "teacher_logits")
    if s.shape != t.shape:
        raise InvalidInputError(f"length mismatch: {s.size} vs {t.size}")
    value, grad = kd_loss_batch(s[None, :], t[None, :], temperature, reverse)
    return LossValueAndGrads(value, {"student_logits": grad[0]})


def kd_loss_batch(student_logits, teacher_logits, temperature, reverse=False):
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise InvalidInputError(f"shape mismatch: {s.shape} vs {t.shape}")
    n = s.shape[0]
    log_q = log_softmax(s, temperature)
    log_p = log_softmax(t, temperature)
    q = np.exp(log_q)
    p = np.exp(log_p)
    if reverse:
        per_row = np.sum(q * (log_q - log_p), axis=1)
        grad = q * (log_q - log_p - per_row[:, None]) / temperature
    else:
        per_row = np.sum(p * (log_p - log_q), axis=1)
        grad = (q - p) / temperature
    per_row = np.maximum(per_row, 0.0)
    return float(per_row.mean()), grad / n


def total_incremental_loss(replay_ce, kd, weight):
    if weight < 0:
        raise InvalidInputError("KD weight must be non-negative")
    return replay_ce + weight * kd

"""Per-class feature memory and uncertainty-filtered pseudo-feature synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .losses import ProtocolError
from .numerics import InvalidInputError, log_softmax

log = logging.getLogger(__name__)


@dataclass
class PseudoFeature:
    vector: np.ndarray
    source_class: int
    alpha: float
    entropy: float
    stored_index: int
    fallback: bool = False


@dataclass
class ClassMemoryBank:
    """Stored real features of one class plus the mean over *all* its features."""

    class_id: int
    stored: np.ndarray
    mean: np.ndarray
    session_id: int = 0
    pseudo: list = field(default_factory=list)
    fallbacks: int = 0


def build_memory_bank(class_id, features, n_stored, rng, session_id=0):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise InvalidInputError(f"class {class_id} has no features")
    if n_stored < 1:
        raise InvalidInputError("number of stored features must be at least 1")
    n = features.shape[0]
    if n_stored >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, n_stored, replace=False))
    return ClassMemoryBank(class_id, features[idx].copy(), features.mean(axis=0), session_id)


def entropy(probabilities):
    """Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("not a probability vector")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(max(-np.sum(nz * np.log(nz)), 0.0))


def entropy_from_logits(logits):
    """Entropy of softmax(logits) computed from log-probabilities."""
    logp = log_softmax(logits)
    return float(max(-np.sum(np.exp(logp) * logp, axis=-1), 0.0))


def resolve_threshold(threshold, n_classes, fraction=0.5):
    """Absolute threshold if given, else ``fraction`` of the maximum entropy ln|C|."""
    if threshold is not None:
        return float(threshold)
    return fraction * float(np.log(n_classes))


def synthesize_pseudo_features(bank, head, n_pseudo, threshold, max_attempts, rng,
                               use_uncertainty=True):
    """Draw convex mixes of a stored feature and the class mean until ``n_pseudo``
    pass the acceptance test (correct argmax under ``head`` and, if
    ``use_uncertainty``, entropy below ``threshold``).

    When ``max_attempts`` is exhausted the remaining slots are filled with the
    class mean and flagged as fallbacks; ``bank.fallbacks`` counts them.
    """
    if n_pseudo < 0:
        raise InvalidInputError("number of pseudo-features must be non-negative")
    if max_attempts < n_pseudo:
        raise InvalidInputError("max_attempts must be at least the number requested")
    out = []
    attempts = 0
    c = bank.class_id
    while len(out) < n_pseudo and attempts < max_attempts:
        attempts += 1
        k = int(rng.integers(bank.stored.shape[0]))
        alpha = rng.open_unit()
        fv = alpha * bank.stored[k] + (1.0 - alpha) * bank.mean
        logits = head.logits(fv)
        h = entropy_from_logits(logits)
        if int(np.argmax(logits)) != c:
            continue
        if use_uncertainty and not h < threshold:
            continue
        out.append(PseudoFeature(fv, c, alpha, h, k))
    missing = n_pseudo - len(out)
    if missing:
        log.warning("class %d: %d pseudo-features fell back to the class mean", c, missing)
        h = entropy_from_logits(head.logits(bank.mean))
        for _ in range(missing):
            out.append(PseudoFeature(bank.mean.copy(), c, 0.0, h, -1, fallback=True))
    bank.fallbacks += missing
    return out


def assemble_replay_set(banks, seen_classes, current_features, current_labels,
                        include_pseudo=True, include_stored=True):
    """Union of current-session features and old-class memory (pseudo and/or stored).

    Returns ``(features, labels)``.
    """
    feats = [np.asarray(current_features, dtype=np.float64).reshape(-1, np.shape(current_features)[-1])]
    labels = [np.asarray(current_labels, dtype=np.int64)]
    for c in seen_classes:
        if c not in banks:
            raise ProtocolError(f"no memory bank for seen class {c}")
        bank = banks[c]
        if include_pseudo and bank.pseudo:
            feats.append(np.stack([p.vector for p in bank.pseudo]))
            labels.append(np.full(len(bank.pseudo), c, dtype=np.int64))
        if include_stored:
            feats.append(bank.stored)
            labels.append(np.full(bank.stored.shape[0], c, dtype=np.int64))
    return np.concatenate(feats, axis=0), np.concatenate(labels)


def audit_pseudo_features(bank, head, threshold, use_uncertainty=True, tol=1e-12):
    """Re-check every accepted pseudo-feature of ``bank`` against ``head``.

    Returns a list of human-readable violations (empty when all pass).
    """
    problems = []
    for i, p in enumerate(bank.pseudo):
        if p.fallback:
            continue
        if not 0.0 < p.alpha < 1.0:
            problems.append(f"class {bank.class_id} #{i}: alpha {p.alpha} outside (0, 1)")
        recon = p.alpha * bank.stored[p.stored_index] + (1.0 - p.alpha) * bank.mean
        err = float(np.linalg.norm(p.vector - recon))
        if not err < tol:
            problems.append(f"class {bank.class_id} #{i}: reconstruction error {err:.3e}")
        logits = head.logits(p.vector)
        if int(np.argmax(logits)) != bank.class_id:
            problems.append(f"class {bank.class_id} #{i}: predicted {int(np.argmax(logits))}")
        h = entropy_from_logits(logits)
        if use_uncertainty and not h < threshold:
            problems.append(f"class {bank.class_id} #{i}: entropy {h:.6f} >= threshold {threshold:.6f}")
    return problems

"""Composed-loss gradient checks through a small MLP, shared by several test modules."""

import numpy as np

from pillfscil.backbone import ClassifierHead, MlpBackbone
from pillfscil.losses import CenterBank, ce_loss_batch, ct_loss_batch, kd_loss_batch, triplet_loss
from pillfscil.numerics import Rng, finite_diff_gradient, relative_error

KINK = 1e-3
LOSSES = ("ce", "triplet", "ct", "kd")


def _params(backbone, head):
    return backbone.parameters() + ([] if head is None else head.parameters())


def _min_preactivation(backbone, x):
    h = x
    smallest = np.inf
    for w, b in zip(backbone.weights[:-1], backbone.biases[:-1]):
        z = h @ w + b
        smallest = min(smallest, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return smallest


class Instance:
    """One random small problem for loss ``kind``; ``evaluate`` gives (value, grads)."""

    def __init__(self, kind, seed):
        self.kind = kind
        r = Rng(seed)
        self.input_dim = int(r.integers(3, 13))
        hidden = int(r.integers(3, 9))
        self.d = int(r.integers(2, 9))
        self.n_classes = int(r.integers(2, 6))
        self.backbone = MlpBackbone.init(self.input_dim, [hidden], self.d, r)
        self.head = ClassifierHead.init(self.d, self.n_classes, r) if kind in ("ce", "kd") else None
        n = 3 if kind == "triplet" else 4
        self.x = r.normal(size=(n, self.input_dim))
        self.y = r.integers(0, self.n_classes, n)
        self.margin = float(r.uniform(0.0, 3.0))
        self.temperature = float(r.uniform(0.5, 5.0))
        self.teacher = r.normal(size=(n, self.n_classes))
        if kind == "ct":
            self.centers = CenterBank(self.n_classes, self.d)
            self.centers.centers[:] = r.normal(size=(self.n_classes, self.d))
            self.centers.initialized[:] = True

    def hinge_argument_margin(self):
        """Smallest |hinge argument| over the instance (inf for smooth losses)."""
        f = self.backbone.forward(self.x)
        if self.kind == "triplet":
            return abs(self.margin + np.linalg.norm(f[0] - f[1]) - np.linalg.norm(f[0] - f[2]))
        if self.kind == "ct":
            out = np.inf
            for fi, yi in zip(f, self.y):
                _, gap = self.centers.nearest_other(int(yi))
                out = min(out, abs(self.margin + np.linalg.norm(fi - self.centers.centers[yi]) - gap))
            return out
        return np.inf

    def near_kink(self):
        return _min_preactivation(self.backbone, self.x) < KINK or self.hinge_argument_margin() < KINK

    def value(self):
        return self.evaluate(grads=False)[0]

    def evaluate(self, grads=True):
        feats = self.backbone.forward(self.x, keep_cache=grads)
        head_grads = []
        if self.kind == "ce":
            logits = self.head.logits(feats)
            v, g = ce_loss_batch(logits, self.y)
            head_grads, g_feats = self.head.backward(feats, g)
        elif self.kind == "kd":
            logits = self.head.logits(feats)
            v, g = kd_loss_batch(logits, self.teacher, self.temperature)
            head_grads, g_feats = self.head.backward(feats, g)
        elif self.kind == "triplet":
            res = triplet_loss(feats[0], feats[1], feats[2], self.margin)
            v = res.value
            g_feats = np.stack([res.grads["anchor"], res.grads["positive"], res.grads["negative"]])
        else:
            v, g_feats = ct_loss_batch(feats, self.y, self.centers, self.margin)
        if not grads:
            return v, None
        return v, self.backbone.backward(g_feats) + list(head_grads)


def check_instance(inst, h=1e-5):
    """Largest norm-wise relative error between analytic and central-difference gradients."""
    _, analytic = inst.evaluate()
    worst = 0.0
    for p, g in zip(_params(inst.backbone, inst.head), analytic):
        def f(pv, p=p):
            old = p.copy()
            p[...] = pv
            try:
                return inst.value()
            finally:
                p[...] = old
        numeric = finite_diff_gradient(f, p, h)
        # both below the central-difference noise floor (~eps / h): nothing to compare
        if max(np.linalg.norm(g), np.linalg.norm(numeric)) < 1e-8:
            continue
        worst = max(worst, relative_error(g, numeric))
    return worst


def run_suite(kind, n_instances=50, start_seed=0):
    """Check ``n_instances`` kink-free instances; returns the list of errors."""
    errors = []
    seed = start_seed
    while len(errors) < n_instances:
        inst = Instance(kind, seed)
        seed += 1
        if inst.near_kink():
            continue
        errors.append(check_instance(inst))
    return errors

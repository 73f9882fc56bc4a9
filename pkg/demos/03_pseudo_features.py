"""
Pseudo-feature synthesis
========================

A memory bank keeps a few real features and the class mean. New features are
mixed from the two and kept only when a classifier head is confident about
them.
"""

import numpy as np

from pillfscil.backbone import ClassifierHead
from pillfscil.numerics import Rng
from pillfscil.pfs import audit_pseudo_features, build_memory_bank, resolve_threshold, synthesize_pseudo_features

rng = Rng(0)
d, n_classes = 4, 3
head = ClassifierHead(np.eye(d)[:, :n_classes] * 3.0)

# features of class 1 scatter around the direction the head scores as class 1
feats = rng.normal(size=(40, d)) * 0.6 + head.weight[:, 1]
bank = build_memory_bank(1, feats, n_stored=5, rng=rng.derive(1))
print("stored", bank.stored.shape, "mean", np.round(bank.mean, 3))

# threshold = half the maximum entropy ln|C|
threshold = resolve_threshold(None, n_classes)
bank.pseudo = synthesize_pseudo_features(bank, head, 10, threshold, 1000, rng.derive(2))
for p in bank.pseudo[:4]:
    print("alpha %.3f  entropy %.3f  from stored #%d" % (p.alpha, p.entropy, p.stored_index))

# every accepted feature can be re-checked later
print("violations:", audit_pseudo_features(bank, head, threshold))
print("fallbacks:", bank.fallbacks)

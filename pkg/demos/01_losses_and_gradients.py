"""
Losses and their gradients
==========================

Every loss returns its value together with an analytic gradient. Here we
evaluate a few by hand and compare the gradients with central differences.
"""

import numpy as np

from pillfscil.losses import CenterBank, ce_loss, ct_loss, kd_loss, triplet_loss
from pillfscil.numerics import finite_diff_gradient, relative_error

# cross-entropy on two logits: -log softmax(z)[y]
res = ce_loss([1.0, 0.0], 1)
print("CE([1, 0], y=1) =", round(res.value, 5))

# triplet hinge: max(0, m + |a - p| - |a - n|)
print("triplet m=1:", triplet_loss([0, 0], [1, 0], [3, 0], 1.0).value)
print("triplet m=3:", triplet_loss([0, 0], [1, 0], [3, 0], 3.0).value)

# center-triplet: distances are to class centers, which are kept by EMA
bank = CenterBank(3, 2)
bank.update([[0.0, 0.0], [3.0, 0.0], [0.0, 5.0]], [0, 1, 2])
ct = ct_loss([1.0, 0.0], 0, bank, margin=3.0)
print("CT value", ct.value, "gradient", ct.grads["f"])

# distillation at temperature T, teacher distribution as the target
kd = kd_loss([1.0, 0.0], [0.0, 1.0], temperature=1.0)
print("KD value", round(kd.value, 5))

# gradient check on KD with a random student
rng = np.random.default_rng(0)
s, t = rng.normal(size=5), rng.normal(size=5)
analytic = kd_loss(s, t, 3.0).grads["student_logits"]
numeric = finite_diff_gradient(lambda z: kd_loss(z, t, 3.0).value, s)
print("KD gradient relative error %.2e" % relative_error(analytic, numeric))

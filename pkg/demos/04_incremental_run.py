"""
A small incremental run
=======================

Runs the three training stages on a reduced protocol and compares the full
method with naive fine-tuning (no replay, no distillation, no virtual
classes). Takes about a minute on one core.
"""

from pillfscil.config import Config
from pillfscil.sessions import build_protocol, naive_finetune_config, run_pipeline

cfg = Config().replace(
    data={"n_base_classes": 10, "n_sessions": 3, "train_per_class": 100, "test_per_class": 50},
    run={"seed": 1, "epoch_scale": 0.2},
)
sessions, _ = build_protocol(cfg)
print("sessions:", [s.classes for s in sessions])

for name, c in [("full", cfg), ("naive", naive_finetune_config(cfg))]:
    report, state = run_pipeline(sessions, c)
    t = report.track("softmax")
    base = t.sessions[-1].subset_accuracy(sessions[0].classes)
    print("%-5s" % name, " ".join("%6.2f" % a for a in t.accuracies),
          "| AA %.2f PD %.2f | base classes at the end %.2f" % (t.aa, t.pd, base))

# the backbone has not moved since stage 1
state.check_frozen()

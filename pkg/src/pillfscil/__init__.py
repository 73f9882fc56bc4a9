"""Few-shot class-incremental learning with forward- and backward-compatible training."""

__version__ = "0.1.0"

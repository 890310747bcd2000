"""Synthetic minority-class augmentation with a DCGAN, and the harness that measures it."""

__version__ = "0.1.0"

"""Adversarial piano-roll generation with unrolled creative adversarial networks."""

__version__ = "0.1.0"

"""Adversarial image synthesis by deep-image-prior reconstruction, with baselines and a robustness harness."""

__version__ = "0.1.0"

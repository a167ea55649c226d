"""Adversarial regression training for additive effect maps."""

__version__ = "0.1.0"

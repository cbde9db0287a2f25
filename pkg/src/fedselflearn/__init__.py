"""Federated continual self-learning for small neural transducers."""

__version__ = "0.1.0"

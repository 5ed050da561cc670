"""Federated-learning robustness lab built around Gram-matrix filtering."""

__version__ = "0.1.0"

"""Uncertainty-aware factorised neural relational inference on simulated particle systems."""

__version__ = "0.1.0"

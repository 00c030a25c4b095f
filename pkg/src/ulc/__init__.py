"""Uncertainty-aware label correction for noisy, class-imbalanced data."""

__version__ = "0.1.0"

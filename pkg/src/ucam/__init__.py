"""Uncertainty-aware attention for a synthetic visual question answering task."""

__version__ = "0.1.0"

"""Ensemble-of-Specialists composition of frozen pyramid encoders."""

__version__ = "0.1.0"

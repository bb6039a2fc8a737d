"""Robust self-ensembling network for hyperspectral patch classification."""

__version__ = "0.1.0"

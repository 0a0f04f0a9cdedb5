"""Reduced-order optimal control with model-discrepancy sensitivity updates."""

__version__ = "0.1.0"

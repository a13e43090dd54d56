"""Desk-scale incremental semantic segmentation with gradient-semantic compensation."""

__version__ = "0.1.0"

"""Adaptive anomaly detection across a three-tier hierarchical edge stack."""

__version__ = "0.1.0"

"""Mixture-model multi-agent behavior simulation on a synthetic 2D driving world."""

__version__ = "0.1.0"

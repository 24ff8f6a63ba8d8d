"""Discrete codebook domain generalization laboratory."""

__version__ = "0.1.0"

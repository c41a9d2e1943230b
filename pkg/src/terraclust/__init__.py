"""Constrained clustering of terrain image patches with triplet metric learning."""

__version__ = "0.1.0"

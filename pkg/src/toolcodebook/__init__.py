"""Continual tool-usage learning with a learnable tool codebook, at desk scale."""

__version__ = "0.1.0"

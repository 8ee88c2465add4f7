"""Masked contrastive representation learning coupled with pixel-based SAC."""

__version__ = "0.1.0"

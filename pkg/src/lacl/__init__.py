"""Lesion-aware contrastive representation learning on synthetic slide data."""

__version__ = "0.1.0"

"""Hierarchical structured-sparsity models over spatially clustered signals."""

__version__ = "0.1.0"

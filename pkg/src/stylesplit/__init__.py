"""Dual-branch self-supervised disentanglement of image style and content."""

__version__ = "0.1.0"

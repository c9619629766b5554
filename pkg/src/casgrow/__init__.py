"""Cascade growth prediction with collaborative graph neural networks."""

__version__ = "0.1.0"

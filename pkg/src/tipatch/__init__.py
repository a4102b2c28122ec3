"""Tiled universal adversarial patches against no-reference quality metrics."""

__version__ = "0.1.0"

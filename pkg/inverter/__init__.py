"""Layered facial template inversion laboratory."""

__version__ = "1.0.0"

"""Hybrid multi-view super-resolution for 4-band satellite imagery."""

__version__ = "0.1.0"

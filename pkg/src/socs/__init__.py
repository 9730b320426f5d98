"""Semantically-aware object coordinate space for category-level pose and size estimation."""

__version__ = "0.1.0"

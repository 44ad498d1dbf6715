"""Desk-scale laboratory for binocular fusion architectures in image-goal navigation."""

__version__ = "0.1.0"

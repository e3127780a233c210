"""Volumetric face prior trained on procedural morphable-model renders."""
__version__ = "0.1.0"

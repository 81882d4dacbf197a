"""Gradient-weighted 3D activation maps for a 2.5D chest-CT classifier with channel/spatial attention."""

__version__ = "0.1.0"

"""Planar object tracking with homography, visibility and confidence estimation."""

__version__ = "0.1.0"

"""Dual-branch 3D semantic occupancy prediction from multi-camera images."""

__version__ = "0.1.0"

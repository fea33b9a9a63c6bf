"""Coarse-to-fine point cloud upsampling on analytic surfaces."""

__version__ = "0.1.0"

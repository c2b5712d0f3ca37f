"""Implicit multi-organ surface reconstruction from voxel volumes."""

__version__ = "0.1.0"

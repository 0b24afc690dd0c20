"""Seed point clouds for sparse-view Gaussian splatting."""

__version__ = "0.1.0"

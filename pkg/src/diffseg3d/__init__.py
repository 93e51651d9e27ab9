"""Unsupervised 3D hierarchical structure discovery with diffusion-model features."""

__version__ = "0.1.0"

"""Constrained unsupervised anomaly segmentation with VAE attention maps."""

__version__ = "0.1.0"

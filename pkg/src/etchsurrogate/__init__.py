"""Etch-rate profile surrogate: autoencoder latents interpolated over sensor space."""

__version__ = "0.1.0"

"""Toy-scale binder generation with partially latent flow matching and inference-time search."""

__version__ = "0.1.0"

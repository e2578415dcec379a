"""Structural inpainting at desk scale: context encoder, losses, training, refinement, metrics."""

__version__ = "0.1.0"

"""Variational multimodal fusion for beam prediction, on numpy."""

__version__ = "0.1.0"

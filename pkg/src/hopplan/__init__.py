"""Guided state-action diffusion planning and control in a toy hopper world."""

__version__ = "0.1.0"

from .estimator import DiffusionPolicy

__all__ = ["DiffusionPolicy", "__version__"]

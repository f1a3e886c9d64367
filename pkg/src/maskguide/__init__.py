"""Mask-guided staged training of 3D classifiers with differentiable Grad-CAM."""

__version__ = "0.1.0"

"""Reduced-order soft-thresholding networks for multiscale flow dynamics."""

__version__ = "0.1.0"

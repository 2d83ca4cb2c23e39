"""Winning-ticket search for small convolutional deepfake detectors."""

__version__ = "0.1.0"

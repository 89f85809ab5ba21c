"""Gradient-shaped saliency and cliff-based span extraction for toxic text."""

__version__ = "0.1.0"

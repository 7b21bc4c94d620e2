"""Heatmap-based out-of-distribution detection for frozen image classifiers."""

__version__ = "0.1.0"

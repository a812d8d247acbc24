"""Metric learning in dissimilarity space with a max-margin dichotomizer."""

__version__ = "0.1.0"

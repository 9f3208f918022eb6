"""Explainable Parkinson's screening on synthetic DaTscan phantoms."""

__version__ = "0.1.0"

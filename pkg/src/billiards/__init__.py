"""Billiards layout analytics: features, learned layout embeddings, outcome prediction and layout generation."""

__version__ = "0.1.0"

"""Pseudo-label self-training with group sampling on unit feature vectors."""

__version__ = "0.1.0"

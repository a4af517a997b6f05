"""Recursive star identification with SVD-based angular velocity estimation."""

__version__ = "0.1.0"

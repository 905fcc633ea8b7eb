"""Sparse super-resolution training with magnitude-ranked soft shrinkage."""

__version__ = "0.1.0"

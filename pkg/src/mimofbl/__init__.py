"""Finite-blocklength error-probability simulation for multicell massive MIMO."""

__version__ = "0.1.0"

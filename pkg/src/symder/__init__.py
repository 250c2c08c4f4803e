"""Sparse symbolic dynamics discovery from partial observations."""

__version__ = "0.1.0"

"""Gradient-free stochastic descent, its momentum variant, and tools to check them."""

__version__ = "0.1.0"

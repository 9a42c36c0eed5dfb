"""Numerical toolkit for backward SDEs with values in a manifold chart."""

__version__ = "0.1.0"

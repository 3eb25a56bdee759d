"""Numerical toolkit for the Jang equation on asymptotically hyperbolic initial data."""

__version__ = "0.1.0"

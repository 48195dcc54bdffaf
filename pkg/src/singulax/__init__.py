"""Numerical verification toolkit for degenerate Bessel-type operators on the half-space."""
__version__ = "0.1.0"

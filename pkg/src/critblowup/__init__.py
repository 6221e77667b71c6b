"""Numerical toolkit for infinite-time blow-up of the critical heat equation."""

__version__ = "0.1.0"

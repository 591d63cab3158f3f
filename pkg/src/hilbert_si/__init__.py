"""Conditional stochastic-interpolant bridges between function spaces."""
__version__ = "0.1.0"

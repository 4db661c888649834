"""Green-function solvers for fractional Schrödinger equations on planar domains."""

__version__ = "0.1.0"

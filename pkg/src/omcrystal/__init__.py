"""Numerical toolkit for a two-dimensional GaAs optomechanical crystal experiment."""

__version__ = "0.1.0"

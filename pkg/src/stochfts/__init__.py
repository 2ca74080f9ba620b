"""Finite-time stability and instability lab for stochastic nonlinear Ito systems."""

__version__ = "0.1.0"

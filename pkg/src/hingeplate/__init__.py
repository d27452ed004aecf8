"""Spectral simulation and control synthesis for the nonlinear hinged plate."""

__version__ = "0.1.0"

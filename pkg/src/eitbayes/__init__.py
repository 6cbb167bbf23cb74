"""Bayesian electrical impedance tomography on the unit disk."""

__version__ = "0.1.0"

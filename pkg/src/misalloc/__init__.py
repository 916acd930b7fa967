"""Nonparametric gross-output production functions and marginal-product dispersion analytics."""
__version__ = "0.1.0"

"""Spatial global sensitivity analysis of 2-D flood models to uncertain topography."""

__version__ = "0.1.0"

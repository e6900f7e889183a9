"""Desk-scale laboratory for energy-parameterized diffusion on 2D densities."""

__version__ = "0.1.0"

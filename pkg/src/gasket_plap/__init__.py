"""Kirchhoff-type p-Laplacian problems on Sierpinski gasket approximations."""

__version__ = "0.1.0"

"""Spline-Galerkin circuit simulator with hierarchical adaptive refinement."""

__version__ = "0.1.0"

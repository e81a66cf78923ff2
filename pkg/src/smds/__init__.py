"""Switching multiscale dynamical systems: simulation, filtering, smoothing and EM."""

__version__ = "0.1.0"

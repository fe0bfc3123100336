"""Particle simulation and correlation estimation for mean-field Langevin systems."""

__version__ = "0.1.0"

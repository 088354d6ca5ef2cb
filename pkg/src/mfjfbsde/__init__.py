"""Particle solvers and verification tools for coupled mean-field FBSDEs with jumps."""

__version__ = "0.1.0"

"""Adjoint lattice Boltzmann topology optimisation of channel flows with heat transport."""

__version__ = "0.1.0"

"""Simulation, identification and estimation of choice models with peer effects
in consideration sets and preferences."""

__version__ = "0.1.0"

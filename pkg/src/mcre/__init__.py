"""Simulation and verification tools for Markov chains in random environments."""

__version__ = "0.1.0"

"""Stochastic 2D thermohaline circulation simulator and verification lab."""

__version__ = "0.1.0"

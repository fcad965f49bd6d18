"""Multiplexed LED-array microscopy simulation with a physics-informed VAE."""

__version__ = "0.1.0"

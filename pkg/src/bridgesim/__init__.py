"""Diffusion bridge simulation with residual and guided proposals."""

__version__ = "0.1.0"

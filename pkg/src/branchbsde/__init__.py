"""Branching-diffusion Monte-Carlo solver for BSDEs with gradient-dependent drivers."""

__version__ = "0.1.0"

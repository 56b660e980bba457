"""Diffusion-model policy with a PID-controlled Lagrange multiplier for safe offline driving."""

__version__ = "0.1.0"

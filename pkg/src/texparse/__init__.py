"""Prompt-grounded human parsing on frozen texture-aligned diffusion features."""

__version__ = "0.1.0"

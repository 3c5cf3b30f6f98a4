"""Difficulty-adaptive RL fine-tuning for pixel-space diffusion restoration."""

__version__ = "0.1.0"

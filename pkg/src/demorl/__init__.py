"""Demonstration-guided reinforcement learning from pixels on a desk-scale point maze."""

__version__ = "0.1.0"

"""Critic-guided segmentation of rewarding objects from sparse reward episodes."""

__version__ = "0.1.0"

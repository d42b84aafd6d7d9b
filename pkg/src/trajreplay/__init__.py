"""Trajectory-corpus divergence and lifelong prediction with generative replay."""

__version__ = "0.1.0"

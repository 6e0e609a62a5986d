"""Dual optimization of embedding information for CAM generation in a small ViT."""

__version__ = "0.1.0"

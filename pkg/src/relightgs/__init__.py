"""Relightable Gaussian splats: decomposition, baking and relighting."""

__version__ = "0.1.0"

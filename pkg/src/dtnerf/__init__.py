"""Decomposed talking-head radiance field on triplane hash grids, trained on a synthetic scene."""

__version__ = "0.1.0"

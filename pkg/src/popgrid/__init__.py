"""Weakly supervised dasymetric population mapping on raster grids."""

__version__ = "0.1.0"

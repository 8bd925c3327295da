"""Dynamic surface reconstruction by optimizing multi-resolution deformation grids."""

__version__ = "0.1.0"

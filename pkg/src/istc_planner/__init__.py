"""Hierarchical multi-vehicle motion planning with interactive
spatio-temporal corridors."""

__version__ = "0.1.0"

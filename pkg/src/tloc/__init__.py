"""Geo-localization as hierarchical geo-cell classification with a dual-branch
patch transformer."""

__version__ = "0.1.0"

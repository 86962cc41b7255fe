"""Synthetic mushroom scenes, implicit pose encoding, clustering and cap pose recovery."""

__version__ = "0.1.0"

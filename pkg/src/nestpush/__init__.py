"""Nonprehensile rearrangement planning with nested push chains in 2D."""

__version__ = "0.1.0"

"""Cone widths of grid sets and Lipschitz constructions built from them."""

__version__ = "0.1.0"

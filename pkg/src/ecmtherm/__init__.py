"""Equivalent-circuit and electro-thermal modelling of a cylindrical primary cell."""

__version__ = "0.1.0"

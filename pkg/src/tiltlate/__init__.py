"""Tilted local average treatment effects for continuous instruments."""

__version__ = "0.1.0"

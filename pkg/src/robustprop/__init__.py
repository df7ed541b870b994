"""Robust propagation toolkit for sparse graphs."""

__version__ = "0.1.0"

"""Multiplicative error models with long- and short-run volatility components."""

__version__ = "0.1.0"

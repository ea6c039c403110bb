"""Airline multimarket-contact panels and high-dimensional fixed-effects OLS."""

__version__ = "0.1.0"

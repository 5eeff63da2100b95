"""Discrete acoustic-unit discovery and resynthesis toolkit."""

__version__ = "0.1.0"

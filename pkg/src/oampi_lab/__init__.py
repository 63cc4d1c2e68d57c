"""Tabular laboratory for offline approximate modified policy iteration."""

__version__ = "0.1.0"

"""Hybrid contextualized sentiment classifier with cold-start aware attention."""

__version__ = "0.1.0"

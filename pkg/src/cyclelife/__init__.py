"""Interpretable battery cycle-life prediction from early discharge curves."""

__version__ = "0.1.0"

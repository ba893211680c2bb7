"""Merge independently trained models and value each source's contribution."""

__version__ = "0.1.0"

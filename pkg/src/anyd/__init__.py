"""Geo-conditional imitation learning on a synthetic multi-region benchmark."""

__version__ = "0.1.0"

"""Dual-channel knowledge-aware recommender engine."""

__version__ = "0.1.0"

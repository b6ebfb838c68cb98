"""Constrained contextual bandits with Thompson sampling and per-round LP allocation."""

__version__ = "0.1.0"

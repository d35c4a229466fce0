"""Balanced metrics, relative balancing and stability invariants on toric manifolds."""

__version__ = "0.1.0"

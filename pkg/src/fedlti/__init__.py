"""Federated identification of coupled linear dynamical systems."""

__version__ = "0.1.0"

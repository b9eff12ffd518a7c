"""Hypernetwork that turns a tabular training set into a small trained MLP in one forward pass."""

__version__ = "0.1.0"

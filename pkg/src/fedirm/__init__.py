"""Federated semi-supervised learning with inter-client relation matching."""

__version__ = "0.1.0"

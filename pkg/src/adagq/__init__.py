"""Federated learning simulator with adaptive heterogeneous gradient quantization."""

__version__ = "0.1.0"

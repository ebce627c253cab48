"""Prototype-based layered federated cross-modal hashing simulator."""

__version__ = "0.1.0"

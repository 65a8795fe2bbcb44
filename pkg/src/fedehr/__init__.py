"""Federated learning and privacy tooling for tabular health records."""

__version__ = "0.1.0"

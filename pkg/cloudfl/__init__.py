"""Hierarchical, cost-aware, Byzantine-robust federated learning simulator."""

__version__ = "0.1.0"

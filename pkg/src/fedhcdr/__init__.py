"""Federated cross-domain recommendation with decoupled hypergraph filters."""

__version__ = "0.1.0"

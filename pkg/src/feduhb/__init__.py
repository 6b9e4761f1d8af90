"""Federated learning simulator with exact heavy-ball unlearning (FedUHB)."""

__version__ = "0.1.0"

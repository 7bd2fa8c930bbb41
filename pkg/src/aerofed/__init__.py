"""Aerial federated anomaly-detection simulator."""

__version__ = "0.1.0"

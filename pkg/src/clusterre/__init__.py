"""Cluster rerandomization: design, estimation and inference for cluster-randomized experiments."""

__version__ = "0.1.0"

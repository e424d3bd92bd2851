"""Distil tabular multi-agent team experts into per-agent decision-tree policies."""

__version__ = "0.1.0"

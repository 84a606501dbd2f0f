"""Collective dual-encoder entity linking at desk scale."""

__version__ = "0.1.0"

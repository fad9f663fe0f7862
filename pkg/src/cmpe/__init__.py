"""Consistency-model and flow-matching posterior estimation for simulation-based inference."""

__version__ = "0.1.0"

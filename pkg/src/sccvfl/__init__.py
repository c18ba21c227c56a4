"""Selective counterfactual consistency for vertically partitioned learning."""

__version__ = "0.1.0"

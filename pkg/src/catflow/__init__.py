"""Categorical flow maps: flow-matching and self-distilled flow-map models on the probability simplex."""

__version__ = "0.1.0"

"""Bayesian concept bottleneck models with oracle-proposed concepts."""

__version__ = "0.1.0"

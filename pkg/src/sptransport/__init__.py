"""Dyadic stochastic parallel transport, Feynman-Kac estimators and their oracles."""

__version__ = "0.1.0"

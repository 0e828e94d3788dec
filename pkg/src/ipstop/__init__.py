"""Optimal stopping for intrusion prevention: POMDP model, exact solver,
episode simulator, baseline and learned policies."""

__version__ = "0.1.0"

"""Estimation of a delta-contaminated Poisson mixing density."""

__version__ = "0.1.0"

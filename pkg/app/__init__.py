"""Bayesian restricted latent class models for multivariate binary data."""

__version__ = "0.1.0"

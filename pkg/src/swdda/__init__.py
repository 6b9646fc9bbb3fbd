"""Unsupervised domain adaptation with a sliced Wasserstein discrepancy."""

__version__ = "0.1.0"

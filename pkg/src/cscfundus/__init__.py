"""Fundus photograph preprocessing, a small CSC classifier, and ROC/kappa evaluation."""

__version__ = "0.1.0"

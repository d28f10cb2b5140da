"""Prevalence estimation and regression for pooled test data."""

__version__ = "0.1.0"

"""Sparse variational GP forecasting for intermittent demand"""

__version__ = "0.1.0"

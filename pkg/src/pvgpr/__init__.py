"""Solar PV power forecasting with clustered Gaussian process regression."""

__version__ = "0.1.0"

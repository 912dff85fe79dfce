"""Mixed-effects neural networks for clustered physiological time series."""

__version__ = "0.1.0"

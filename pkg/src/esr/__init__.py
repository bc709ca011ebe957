"""Expected statistic regularization for low-resource dependency parsing."""

__version__ = "0.1.0"

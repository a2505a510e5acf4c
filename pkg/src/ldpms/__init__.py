"""Large-deviation toolkit for jump diffusions with fast periodic coefficients."""

__version__ = "0.1.0"

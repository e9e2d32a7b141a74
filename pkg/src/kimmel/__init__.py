"""Parasites in dividing cells: exact solvers and Monte Carlo for the discrete Kimmel model."""

__version__ = "0.1.0"

"""Distributionally robust backward reachable trees for linear Gaussian systems."""

__version__ = "0.1.0"

"""Sparse bidirectional-LSTM prediction of internal clock time and DLMO from gene expression."""

__version__ = "0.1.0"

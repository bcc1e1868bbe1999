"""Gradient balance of DPO-style preference losses on tabular softmax policies."""

__version__ = "0.1.0"

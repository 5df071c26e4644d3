"""Exact batch reconstruction from fully connected ReLU layer gradients."""

__version__ = "0.1.0"

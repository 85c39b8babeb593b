"""Deeply-supervised graph neural networks with a numpy autodiff engine."""

__version__ = "0.1.0"

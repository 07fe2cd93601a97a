"""Intertwined diffusions: link kernels, coupled SDEs and statistical certification."""

__version__ = "0.1.0"

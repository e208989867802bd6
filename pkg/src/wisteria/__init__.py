"""Wisteria: a desk-scale DNA language model on a self-contained f64 autograd core."""

__version__ = "0.1.0"

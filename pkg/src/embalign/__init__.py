"""Desk-scale lab for sliding-window embedding alignment between encoders."""

__version__ = "0.1.0"

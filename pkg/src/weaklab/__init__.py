"""Negative-bag sampling strategies for weak-label (multiple-instance) learning."""

__version__ = "0.1.0"

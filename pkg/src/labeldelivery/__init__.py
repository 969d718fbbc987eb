"""Soft-label vs hard-label delivery of annotator distributions, with a numpy MLP and diagnostics."""

__version__ = "0.1.0"

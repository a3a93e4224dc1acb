"""Sampling-based planning with timed reach-avoid costs and CBF safety filters."""

__version__ = "0.1.0"

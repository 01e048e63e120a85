"""Faded-experience TRPO for power allocation in interference channels."""

__version__ = "0.1.0"

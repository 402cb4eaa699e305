"""Dataless quality metrics for trained image classifiers."""

__version__ = "0.1.0"

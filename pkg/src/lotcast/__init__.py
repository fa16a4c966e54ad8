"""Ego-intention-conditioned joint trajectory prediction for parking scenes."""

__version__ = "0.1.0"

"""Composite variational autoencoders with hybrid pathwise/score-function training."""

__version__ = "0.1.0"

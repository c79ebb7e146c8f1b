"""Learned step-size gradient descent on batched quadratic least squares."""

__version__ = "0.1.0"

"""Numerical bisection experiments for small vision networks, from stimuli to statistics."""

__version__ = "0.1.0"

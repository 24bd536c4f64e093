"""Drift inference for stochastic differential equations from sparse
observations, using geometry-guided bridge augmentation and sparse GP
regression."""

__version__ = "0.1.0"

"""Accelerated gradient flow sampler: interacting particle implementation and baselines."""

__version__ = "1.0.0"

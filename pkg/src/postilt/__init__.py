"""Sampling-based inverse lithography: generator proposals, batched ILT refinement, best-of-K selection."""

__version__ = "0.1.0"

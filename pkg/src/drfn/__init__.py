"""Recurrent fusion super-resolution network and its training/evaluation
pipeline, implemented on numpy with hand-written analytic gradients."""

__version__ = "0.1.0"

"""Poisson embedding model, biased low-rank AMP and its state evolution."""
__version__ = "0.1.0"

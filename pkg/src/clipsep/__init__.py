"""Query-conditioned sound separation with noise-invariant training."""

__version__ = "0.1.0"

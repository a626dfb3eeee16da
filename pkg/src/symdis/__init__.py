"""Symmetry-structure discovery and block-disentangled latent dynamics."""

__version__ = "0.1.0"

"""Interleaved Gibbs diffusion for mixed discrete-continuous sequences."""

__version__ = "0.1.0"

"""Dual-path latent crystallization on a tiny vision-language decoder."""

__version__ = "0.1.0"

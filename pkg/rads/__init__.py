"""Reachability-aware diffusion steering on a toy denoiser."""

__version__ = "0.1.0"

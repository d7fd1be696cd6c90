"""Diffusion-based image fusion with guidance weights driven by information gains."""

__version__ = "0.1.0"

"""Desk-scale laboratory for separating motion from appearance in video diffusion adaptation."""

__version__ = "0.1.0"

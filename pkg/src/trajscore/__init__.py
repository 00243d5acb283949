"""Desk-scale laboratory for learned multimodal trajectory scoring."""

__version__ = "0.1.0"

"""Desk-scale retrieval-augmented translation with contrastive memories."""

__version__ = "0.1.0"

"""Syntax-guided source reordering and reordering-conditioned paraphrase generation."""

__version__ = "0.1.0"

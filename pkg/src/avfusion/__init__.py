"""Desk-scale audio-visual sequence recognizer with gated cross-attention fusion."""

__version__ = "0.1.0"

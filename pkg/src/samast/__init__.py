"""Sharpness-aware training of a desk-scale spectrogram transformer for respiratory sounds."""

__version__ = "0.1.0"

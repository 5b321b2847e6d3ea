"""Describe-to-score image complexity lab: vision-text alignment with
entropy buffers, a momentum model, energy-distance and InfoNCE losses, and
vision-only inference on synthetic scenes."""

__version__ = "0.1.0"

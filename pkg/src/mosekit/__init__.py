"""Desk-scale multi-exit encoder with layer-weighted self-distillation."""

__version__ = "0.1.0"

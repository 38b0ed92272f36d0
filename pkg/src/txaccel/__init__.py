"""Transformer and accelerator co-design workbench."""

__version__ = "0.1.0"

"""Cycle-approximate simulator for a 3D-stacked mixture-of-experts accelerator."""

__version__ = "0.1.0"

"""Radar route segmentation from weak audio supervision, on synthetic data."""

__version__ = "0.1.0"

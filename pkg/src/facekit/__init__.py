"""Bilinear face models, two-layer detail maps, image fitting and reconstruction benchmarking."""

__version__ = "0.1.0"

"""Toy multimodal text/image generative model with hard-routed low-rank experts."""

__version__ = "0.1.0"

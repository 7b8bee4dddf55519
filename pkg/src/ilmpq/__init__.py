"""Intra-layer multi-precision, mixed-scheme (PoT / fixed-point) quantization."""

__version__ = "0.1.0"

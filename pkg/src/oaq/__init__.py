"""Overflow-aware low-bit quantization with 16-bit accumulators."""

__version__ = "0.1.0"

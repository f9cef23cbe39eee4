"""Shared-KV attention pipeline and roofline serving model."""

__version__ = "0.1.0"

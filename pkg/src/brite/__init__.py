"""Brightness-invariant motion tracking for sinusoidally tagged image sequences."""

__version__ = "0.1.0"

"""Desk-scale two-stream text-to-face synthesis on a synthetic world."""

__version__ = "0.1.0"

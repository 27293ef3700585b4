"""Weakly supervised baby-cry detection."""

__version__ = "0.1.0"

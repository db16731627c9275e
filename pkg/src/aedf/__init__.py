"""Domain-compensated acoustic event detection."""

__version__ = "0.1.0"

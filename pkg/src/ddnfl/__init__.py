"""Data-driven design and certification of neural feedback loops for LTI plants."""

__version__ = "0.1.0"

"""Profile-to-frontal face matching with a pose attention block."""

__version__ = "0.1.0"

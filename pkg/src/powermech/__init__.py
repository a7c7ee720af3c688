"""Private embedding release with the power mechanism."""

__version__ = "0.1.0"

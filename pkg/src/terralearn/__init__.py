"""Online genetic-algorithm identification and control of a car on a slippery slope."""

__version__ = "0.1.0"

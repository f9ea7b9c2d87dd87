"""Dual image/text encoder with sliding-window encoding of long captions."""

__version__ = "0.1.0"

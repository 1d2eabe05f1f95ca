"""Desk-scale forward-backward behaviour foundation models with memory."""

__version__ = "0.1.0"

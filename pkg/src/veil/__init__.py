"""Masked-SNI secure channel establishment and the middlebox it defeats."""

__version__ = "0.1.0"

"""Opti-acoustic object SLAM for underwater vehicles."""

__version__ = "0.1.0"

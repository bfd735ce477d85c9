"""Montage-based retrieval of whole-brain CT scans."""

__version__ = "0.1.0"

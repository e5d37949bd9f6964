"""Position-aware transformer toolkit for document-to-document translation."""

__version__ = "0.1.0"

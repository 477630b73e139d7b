"""Unstructured-sparse and int8 inference toolkit for small transformers."""

__version__ = "0.1.0"

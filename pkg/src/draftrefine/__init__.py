"""Retrieve a similar comment, then refine it over several decoding passes."""

__version__ = "0.1.0"

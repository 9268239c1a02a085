"""Pseudo action localization pre-training on a synthetic video corpus."""

__version__ = "0.1.0"

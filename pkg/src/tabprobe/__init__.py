"""Probing and logit-lens toolkit for tabular in-context-learning transformers."""

__version__ = "0.1.0"

"""Multilingual image caption engine with a hand-rolled autodiff core."""

__version__ = "0.1.0"

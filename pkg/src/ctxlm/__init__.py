"""Contextual RNN language models conditioned on datetime, geo-hash and dialogue prompts."""

__version__ = "0.1.0"

"""Noise-robust preference-based RL with tri-teaching reward ensembles and few-shot demonstrations."""

__version__ = "0.1.0"

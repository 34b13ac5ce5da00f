"""Decentralized multi-source domain adaptation by consensus distillation (KD3A)."""

__version__ = "0.1.0"

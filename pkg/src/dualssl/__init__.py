"""Dual-stream self-supervised pretraining and fine-tuning of a small Vision Transformer."""

__version__ = "0.1.0"

"""Desk-scale multi-camera latent world model: synthetic data, video tokenizer, flow-matching transformer."""

__version__ = "0.1.0"

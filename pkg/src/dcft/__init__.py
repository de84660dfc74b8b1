"""Deconvolution fine-tuning (DCFT) toolkit with a LoRA baseline."""

__version__ = "0.1.0"

"""Trace-driven simulation and scheduling of batched multi-LoRA fine-tuning."""

__version__ = "0.1.0"

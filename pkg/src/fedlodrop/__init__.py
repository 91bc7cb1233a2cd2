"""Federated LoRA fine-tuning with per-device adapter dropout and joint dropout/subcarrier allocation."""

__version__ = "0.1.0"

"""Multimodal manipulation detection and grounding with alignment-guided training."""

__version__ = "0.1.0"

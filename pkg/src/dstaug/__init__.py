"""LLM-driven data augmentation for low-resource dialogue state tracking."""

__version__ = "0.1.0"

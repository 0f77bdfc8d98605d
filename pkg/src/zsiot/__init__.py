"""Zero-shot IoT sensing with text-aligned sensor embeddings."""

__version__ = "0.1.0"

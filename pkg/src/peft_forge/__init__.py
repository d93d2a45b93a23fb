"""Parameter-efficient fine-tuning modules with multi-task sharing on a small encoder-decoder."""

__version__ = "0.1.0"

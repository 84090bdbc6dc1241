"""Forward-forward BLER prediction with threshold-triggered online fine-tuning."""

__version__ = "0.1.0"

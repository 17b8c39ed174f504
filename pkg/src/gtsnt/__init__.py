"""Linear-time graph transformer with spiking node tokenization."""

__version__ = "0.1.0"

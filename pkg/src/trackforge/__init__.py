"""Online speaker tracking on speaker embeddings with a small convolutional scorer."""

__version__ = "0.1.0"

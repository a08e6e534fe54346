"""Joint streaming ASR + endpointer multitask training, desk scale."""

__version__ = "0.1.0"

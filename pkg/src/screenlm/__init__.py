"""Screenshot language models: rendering, patch-and-text prediction, autoregressive extension."""

__version__ = "0.1.0"

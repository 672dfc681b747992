"""Real-time voice activity projection for two-party dialogue."""

__version__ = "0.1.0"

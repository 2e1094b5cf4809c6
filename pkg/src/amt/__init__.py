"""Frame-wise polyphonic piano transcription from constant-Q features."""

__version__ = "0.1.0"

"""uniseq: a unified text/location/vision token sequence-to-sequence model."""

__version__ = "0.1.0"

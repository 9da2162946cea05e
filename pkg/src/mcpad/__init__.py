"""Multi-channel face detection used as presentation attack detection."""

__version__ = "0.1.0"

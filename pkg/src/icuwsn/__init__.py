"""Intelligent cooperative link scheduling and power control for underwater acoustic sensor networks."""

__version__ = "0.1.0"

"""Clauser-Horne analysis of time-tagged EPRB event streams and its quantum prediction."""

__version__ = "0.1.0"

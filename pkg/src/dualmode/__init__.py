"""Dual-mode visual token processing: standby tokens, focus/standby inference, streaming memory."""

__version__ = "0.1.0"

"""Stateful self-context-engineering agent runtime."""

__version__ = "1.0.0"

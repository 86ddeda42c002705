"""Circuit discovery tools for garden-path processing in small transformer LMs."""

__version__ = "0.1.0"

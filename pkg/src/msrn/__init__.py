"""Multi-layered semantic representation network for multi-label image classification."""

__version__ = "0.1.0"

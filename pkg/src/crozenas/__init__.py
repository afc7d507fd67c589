"""Training-free robust architecture search with the CRoZe consistency proxy."""

__version__ = "0.1.0"

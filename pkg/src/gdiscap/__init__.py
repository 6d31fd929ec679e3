"""Group-based distinctive image captioning at desk scale."""

__version__ = "0.1.0"

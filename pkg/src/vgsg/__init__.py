"""Vision-guided semantic-group alignment for text-based person search, at desk scale."""

__version__ = "0.1.0"

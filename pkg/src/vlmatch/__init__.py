"""Vision-language query-image matching at desk scale."""

__version__ = "0.1.0"

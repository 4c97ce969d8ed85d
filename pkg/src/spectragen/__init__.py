"""spectragen: hyperspectral image generation toolkit."""

__version__ = "0.1.0"

"""Localization of local hue-modification forgeries by Siamese patch matching."""

__version__ = "0.1.0"

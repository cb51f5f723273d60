"""Open-path PIMD with variationally enhanced sampling of the end-to-end displacement."""

__version__ = "0.1.0"

"""Joint registration and segmentation networks joined by cross-stitch units."""

__version__ = "0.1.0"

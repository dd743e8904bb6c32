"""Hotspot detection toolkit for drone thermal imagery of solar plants."""

from pvhotspot.geometry import CLASS_NAMES, BBox, Detection

__version__ = "0.1.0"

__all__ = ["BBox", "CLASS_NAMES", "Detection", "__version__"]

"""Joint object-boundary detection and boundary flow on small synthetic scenes."""

__version__ = "0.1.0"

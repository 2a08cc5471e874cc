"""Feature-map vulnerability analysis and selective hardening for CNN inference."""

__version__ = "0.1.0"

"""History-based trust establishment between mobile devices."""

__version__ = "0.1.0"

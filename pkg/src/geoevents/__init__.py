"""Event detection over geo-tagged tweet streams with an image-coherence gate."""

__version__ = "0.1.0"

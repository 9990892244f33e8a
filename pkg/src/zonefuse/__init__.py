"""Urban functional zone discovery from sparse POIs and GPS activity."""

__version__ = "0.1.0"

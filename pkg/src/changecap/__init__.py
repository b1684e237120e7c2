"""Change captioning with dual attention and a dynamic speaker, plus a synthetic pair generator."""

__version__ = "0.1.0"

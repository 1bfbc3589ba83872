"""tseforge: desk-scale target sound extraction with layer-fused transformer features."""

__version__ = "0.1.0"

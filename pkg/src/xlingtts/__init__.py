"""Cross-lingual speaker similarity for a miniature multilingual transformer TTS."""

__version__ = "0.1.0"

"""Speaker localization in a room from ad-hoc microphone nodes."""

__version__ = "0.1.0"

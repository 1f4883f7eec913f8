"""Cross-modal fusion for multi-modal (video + audio) sequence classification."""

__version__ = "0.1.0"

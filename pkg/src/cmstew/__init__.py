"""Cross-modal knowledge transfer from a stronger to a weaker modality."""

__version__ = "0.1.0"

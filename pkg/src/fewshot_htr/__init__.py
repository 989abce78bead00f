"""Few-shot, segmentation-free transcription of rare-alphabet handwriting."""

__version__ = "0.1.0"

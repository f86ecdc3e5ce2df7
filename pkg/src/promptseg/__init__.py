"""Visual-prompt multi-scale transformer decoding for generalized few-shot
segmentation, exercised on a synthetic feature pipeline."""

__version__ = "0.1.0"

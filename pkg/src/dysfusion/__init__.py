"""Speech + text dysarthria assessment: feature extraction, cross-attention fusion model and training."""

__version__ = "0.1.0"

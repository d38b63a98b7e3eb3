"""Semi-supervised building footprint segmentation with feature and output consistency."""

__version__ = "0.1.0"

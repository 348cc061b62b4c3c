"""Instance-aware segmentation with a multi-task network cascade, at desk scale."""

__version__ = "0.1.0"

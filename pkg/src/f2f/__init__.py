"""F2F forecasting of semantic segmentation features on synthetic clips."""

__version__ = "0.1.0"

"""Object detection pipeline toolkit: multi-detector box fusion, assisted
labeling, consensus datasets and FP-driven augmentation for aerial imagery."""

__version__ = "0.1.0"

"""Projection-anchored multi-scale deformable attention fusion of image features
into 3D point features, with a toy detection pipeline and evaluation metrics."""

__version__ = "0.1.0"

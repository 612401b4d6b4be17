"""Representation-aggregation networks for patch-grid tumour segmentation."""

__version__ = "0.1.0"

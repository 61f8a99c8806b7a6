"""Retinal keypoint detection, description, and registration toolkit."""

__version__ = "0.1.0"

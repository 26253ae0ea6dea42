"""Keyframe-based visual-inertial SLAM on a synthetic sensor world."""

__version__ = "0.1.0"

"""Offline LiDAR multi-object tracking and track-level box refinement."""

__version__ = "0.1.0"

"""Scene-text loop closure for LiDAR SLAM."""

__version__ = "0.1.0"

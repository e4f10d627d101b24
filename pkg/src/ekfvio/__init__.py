"""Hybrid filtering visual-inertial odometry with a loosely coupled SLAM layer."""

__version__ = "0.1.0"

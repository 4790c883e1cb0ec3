"""Visual-inertial odometry with tightly coupled magnetometer factors."""

__version__ = "0.1.0"

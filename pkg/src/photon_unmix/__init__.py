"""Photon-efficient single-photon LIDAR imaging at low signal-to-background ratio."""

__version__ = "0.1.0"

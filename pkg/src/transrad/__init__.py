"""Radar 3D object detection on range-azimuth-Doppler cubes."""

__version__ = "0.1.0"

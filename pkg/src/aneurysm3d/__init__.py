"""Attention 3D U-Net aneurysm detection on TOF-MRA-like volumes, in numpy."""

__version__ = "0.1.0"

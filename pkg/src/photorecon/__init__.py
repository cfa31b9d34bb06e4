"""photorecon: 3D reconstruction and segmentation of dissection photograph stacks."""

__version__ = "0.1.0"

"""Atlas-guided dual-branch 3D segmentation on synthetic phantoms."""

__version__ = "0.1.0"

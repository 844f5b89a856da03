"""Monocular 3D object detection with depth-aware feature enhancement and a depth-aware transformer.

Numpy only: a small reverse-mode autodiff core, the depth-bin, feature
enhancement, transformer, detection, KITTI I/O and evaluation modules, and a
toy training driver over synthetic scenes.
"""

__version__ = "0.1.0"

"""Volumetric uncertainty toolkit: stochastic voxel radiance fields, a 3D
uncertainty field for unseen-space detection, pixel-wise uncertainty
rendering, and next-best-view planning on procedural occluded scenes."""

__version__ = "0.1.0"

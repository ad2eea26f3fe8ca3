"""pointfill: conditional diffusion + refinement for point cloud completion."""

__version__ = "0.1.0"

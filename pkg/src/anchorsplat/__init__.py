"""Anchor-based Gaussian splatting for joint image rendering and surface
reconstruction, CPU-only.

The package trains a single anchor field whose MLP heads decode neural
Gaussians for two blending passes: a rendering pass (color) and a geometry
pass (depth/normal) driven by a residual covariance head, with
geometry-guided densification and TSDF mesh extraction.
"""

__version__ = "0.1.0"

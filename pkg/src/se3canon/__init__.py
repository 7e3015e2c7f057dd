"""SE(3) canonicalization of point clouds and robot actions.

A numpy library for learning pose-invariant manipulation policies:
rotation-equivariant canonical-frame estimation from point clouds, frame
transport of robot states and actions, a neighborhood-aggregation scene
encoder, diffusion and flow-matching action heads, and a synthetic task
harness with an equivariance-focused evaluation protocol.
"""

from . import autodiff, canon, data, encoder, geom, harness, invariants, pointcloud, policy, vn

__all__ = [
    "autodiff",
    "canon",
    "data",
    "encoder",
    "geom",
    "harness",
    "invariants",
    "pointcloud",
    "policy",
    "vn",
]

__version__ = "0.1.0"

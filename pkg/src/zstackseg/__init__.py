"""Weakly supervised 3D cell instance segmentation from microscopy Z-stacks.

Two-stage pipeline: a centre-likelihood regressor trained from centroid
annotations seeds peak-response pseudo labels, a segmentation network
refines them under image guidance, and a marker-based watershed assigns
instances.
"""

__version__ = "0.1.0"

from .volio import CentroidSet, DatasetManifest, Volume, read_volume, write_volume

__all__ = [
    "CentroidSet",
    "DatasetManifest",
    "Volume",
    "read_volume",
    "write_volume",
    "__version__",
]

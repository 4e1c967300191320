"""Centre-likelihood training targets from centroid annotations.

Every voxel gets a Gaussian-like value decaying with the distance to its
nearest centre, cut off beyond a radius, and forced to zero on the
discrete Voronoi borders so that adjacent cells stay separable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volio import CentroidSet, Volume


@dataclass(frozen=True)
class CenterMapParams:
    """Shape of the per-centre likelihood profile.

    d_m: cutoff radius in voxels; k: decay rate. anisotropy scales
    per-axis distances (None = take the spacing ratio of the volume).
    """

    d_m: float = 8.0
    k: float = 3.0
    anisotropy: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.d_m <= 0:
            raise ValueError(f"d_m must be > 0, got {self.d_m}")
        if self.k <= 0:
            raise ValueError(f"k must be > 0, got {self.k}")
        if self.anisotropy is not None:
            if len(self.anisotropy) != 3 or any(a <= 0 for a in self.anisotropy):
                raise ValueError(f"anisotropy must be three positive scales, got {self.anisotropy}")


def anisotropy_from_spacing(spacing: tuple[float, float, float]) -> tuple[float, float, float]:
    """Per-axis distance scales that make voxel distances micron-true."""
    m = min(spacing)
    return tuple(s / m for s in spacing)


def nearest_centroid_field(
    dims: tuple[int, int, int],
    centroids: CentroidSet,
    anisotropy: tuple[float, float, float] | None = None,
) -> tuple[Volume, Volume]:
    """Assign every voxel to its nearest centroid.

    Returns (assignment, distance): assignment holds 1-based centroid
    indices (ties go to the lowest index), distance the scaled Euclidean
    distance to that centroid.
    """
    if len(centroids) == 0:
        raise ValueError("nearest_centroid_field requires at least one centroid")
    centroids.check_inside(dims)
    scale = np.ones(3) if anisotropy is None else np.asarray(anisotropy, dtype=np.float64)

    zz, yy, xx = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    best_d2 = np.full(dims, np.inf)
    best_idx = np.zeros(dims, dtype=np.uint16)
    for i, c in enumerate(centroids.points):
        d2 = (
            (scale[0] * (zz - c[0])) ** 2
            + (scale[1] * (yy - c[1])) ** 2
            + (scale[2] * (xx - c[2])) ** 2
        )
        closer = d2 < best_d2  # strict: ties keep the earlier (lower) index
        best_d2[closer] = d2[closer]
        best_idx[closer] = i + 1
    assignment = Volume(best_idx)
    distance = Volume(np.sqrt(best_d2).astype(np.float32))
    return assignment, distance


def voronoi_borders(assignment: Volume) -> Volume:
    """Mark voxels whose 6-neighbourhood contains a different assignment."""
    a = assignment.data
    border = np.zeros(a.shape, dtype=bool)
    for axis in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        differs = a[tuple(sl_lo)] != a[tuple(sl_hi)]
        border[tuple(sl_lo)] |= differs
        border[tuple(sl_hi)] |= differs
    return Volume(border.astype(np.uint8), assignment.spacing)


def build_center_map(
    dims: tuple[int, int, int],
    centroids: CentroidSet,
    params: CenterMapParams,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume:
    """Per-voxel centre likelihood: exp(-k * D / d_m) inside the cutoff,
    zero beyond it and on Voronoi borders."""
    anis = params.anisotropy
    if anis is None:
        anis = anisotropy_from_spacing(spacing)
    assignment, distance = nearest_centroid_field(dims, centroids, anis)
    border = voronoi_borders(assignment).data.astype(bool)
    d = distance.data.astype(np.float64)
    p = np.exp(-params.k * d / params.d_m)
    p[d > params.d_m] = 0.0
    p[border] = 0.0
    return Volume(p.astype(np.float32), spacing)

"""Instance assignment: merge nearby likelihood peaks, then flood the
segmentation foreground with a marker-based watershed.

The flood topography is the negative smoothed likelihood, so each cell's
centre sits in its own basin by construction of the training target.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .prm import Peak, PeakSet, single_linkage_groups
from .refine import gaussian_smooth
from .volio import Volume

_NEIGHBORS_6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class InstancerParams:
    merge_radius: float = 5.0
    topography_sigma: float = 1.0

    def __post_init__(self):
        if self.merge_radius < 0:
            raise ValueError(f"merge_radius must be >= 0, got {self.merge_radius}")
        if self.topography_sigma <= 0:
            raise ValueError(f"topography_sigma must be > 0, got {self.topography_sigma}")


def merge_peaks(peaks: PeakSet, merge_radius: float) -> PeakSet:
    """Collapse single-linkage clusters (chained distance <= merge_radius)
    to one peak each at the score-weighted mean coordinate, score = cluster
    max; output ordered by falling score, then coordinate."""
    if len(peaks) == 0:
        return PeakSet([])
    coords = peaks.coords()
    scores = peaks.scores()
    merged = []
    for group in single_linkage_groups(coords, merge_radius):
        c = coords[group]
        s = scores[group]
        mean = (c * s[:, None]).sum(axis=0) / s.sum()
        merged.append(Peak(coord=tuple(float(v) for v in mean), score=float(s.max())))
    merged.sort(key=lambda p: (-p.score, p.coord))
    return PeakSet(merged)


def assign_instances(
    foreground: Volume,
    likelihood: Volume,
    peaks: PeakSet,
    params: InstancerParams,
) -> Volume:
    """Priority-flood watershed over -G(likelihood) seeded at merged peaks,
    restricted to the foreground (6-connectivity). Foreground voxels no
    flood reaches take the label of the nearest labelled voxel; background
    stays 0. Label ids follow merged-peak order."""
    fg = foreground.data.astype(bool)
    if fg.shape != likelihood.data.shape:
        raise ValueError(
            f"foreground dims {fg.shape} != likelihood dims {likelihood.data.shape}"
        )
    labels = np.zeros(fg.shape, dtype=np.uint16)
    if not fg.any():
        return Volume(labels, foreground.spacing)

    merged = merge_peaks(peaks, params.merge_radius)
    seeds = []
    for peak in merged.peaks:
        voxel = tuple(int(round(c)) for c in peak.coord)
        voxel = tuple(np.clip(voxel, 0, np.array(fg.shape) - 1))
        if fg[voxel]:
            seeds.append(voxel)
        else:
            warnings.warn(f"dropping peak at {voxel}: not inside the foreground")
    if not seeds:
        raise ValueError("no markers: every peak fell outside the foreground")

    topo = -gaussian_smooth(likelihood.data.astype(np.float64), params.topography_sigma)

    heap = []
    counter = 0
    for i, voxel in enumerate(seeds):
        if labels[voxel]:
            warnings.warn(f"seed {i + 1} at {voxel} collides with seed {labels[voxel]}")
            continue
        labels[voxel] = i + 1
        heapq.heappush(heap, (topo[voxel], counter, voxel))
        counter += 1
    dims = fg.shape
    while heap:
        _, _, voxel = heapq.heappop(heap)
        lab = labels[voxel]
        for d in _NEIGHBORS_6:
            nb = (voxel[0] + d[0], voxel[1] + d[1], voxel[2] + d[2])
            if not (0 <= nb[0] < dims[0] and 0 <= nb[1] < dims[1] and 0 <= nb[2] < dims[2]):
                continue
            if fg[nb] and labels[nb] == 0:
                labels[nb] = lab
                heapq.heappush(heap, (topo[nb], counter, nb))
                counter += 1

    unreached = fg & (labels == 0)
    if unreached.any():
        # disconnected foreground with no seed: adopt the nearest label
        _, nearest = ndimage.distance_transform_edt(labels == 0, return_indices=True)
        labels[unreached] = labels[tuple(idx[unreached] for idx in nearest)]
    return Volume(labels, foreground.spacing)

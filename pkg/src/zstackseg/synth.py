"""Synthetic bright-field-like Z-stack generator with ground truth.

Cells are non-overlapping ellipsoids rendered slice by slice as a bright
membrane annulus around a darker interior; each cell's in-plane blur
grows linearly with the distance between the slice and the cell's focal
plane, emulating the defocus cue of a Z-stack. Annotations are the exact
centroids plus Gaussian jitter, clamped back into the owning instance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volio import (
    CentroidSet,
    DatasetManifest,
    ManifestEntry,
    Volume,
    write_centroids,
    write_manifest,
    write_volume,
)

MAX_PLACEMENT_ATTEMPTS = 1000
# cells are membrane (shell) from this fraction of the radius outwards
SHELL_INNER_FRACTION = 0.75


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (16, 64, 64)
    spacing: tuple[float, float, float] = (2.0, 1.0, 1.0)
    cell_count: tuple[int, int] = (3, 8)
    radius_range: tuple[float, float] = (3.0, 7.0)
    axis_scale_jitter: float = 0.3
    defocus_coefficient: float = 0.6
    membrane_contrast: float = 0.35
    interior_contrast: float = -0.2
    background_level: float = 0.4
    noise_sigma: float = 0.02
    centroid_jitter_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.cell_count[0] < 1 or self.cell_count[1] < self.cell_count[0]:
            raise ValueError(f"cell_count range invalid: {self.cell_count}")
        if self.radius_range[0] <= 0 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError(f"radius_range invalid: {self.radius_range}")
        if not 0 <= self.axis_scale_jitter < 1:
            raise ValueError(f"axis_scale_jitter must be in [0,1), got {self.axis_scale_jitter}")
        if self.defocus_coefficient < 0 or self.noise_sigma < 0 or self.centroid_jitter_sigma < 0:
            raise ValueError("defocus/noise/jitter parameters must be >= 0")
        # the largest allowed cell must fit the grid along every axis
        r_max = self.radius_range[1] * (1 + self.axis_scale_jitter)
        for axis in range(3):
            if 2 * r_max / self.spacing[axis] >= self.dims[axis]:
                raise ValueError(
                    f"radius_range does not fit dims along axis {axis}: "
                    f"2*{r_max}/{self.spacing[axis]} >= {self.dims[axis]}"
                )


@dataclass
class SynthSample:
    image: Volume
    gt_instances: Volume
    gt_centroids: CentroidSet
    annotations: CentroidSet


@dataclass
class _Cell:
    center: np.ndarray  # (z, y, x) voxel coords
    radii: np.ndarray  # (z, y, x) voxel radii


def _normalized_distance(dims, center, radii) -> np.ndarray:
    """rho(v): 0 at the centre, 1 on the ellipsoid surface."""
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    rho2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return np.sqrt(rho2)


def _place_cells(cfg: SynthConfig, rng: np.random.Generator):
    target = int(rng.integers(cfg.cell_count[0], cfg.cell_count[1] + 1))
    dims = np.array(cfg.dims)
    spacing = np.array(cfg.spacing)
    occupancy = np.zeros(cfg.dims, dtype=bool)
    labels = np.zeros(cfg.dims, dtype=np.uint16)
    cells: list[_Cell] = []
    for k in range(target):
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = rng.uniform(*cfg.radius_range)
            scales = rng.uniform(1 - cfg.axis_scale_jitter, 1 + cfg.axis_scale_jitter, size=3)
            radii = r * scales / spacing  # per-axis voxel radii
            lo = radii
            hi = dims - 1 - radii
            if np.any(hi <= lo):
                continue
            center = rng.uniform(lo, hi)
            mask = _normalized_distance(cfg.dims, center, radii) <= 1.0
            if (mask & occupancy).any():
                continue
            occupancy |= mask
            labels[mask] = len(cells) + 1
            cells.append(_Cell(center=center, radii=radii))
            placed = True
            break
        if not placed:
            warnings.warn(
                f"placed only {len(cells)} of {target} cells after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts each"
            )
            break
    return cells, labels


def slice_blur_sigma(cfg: SynthConfig, cell_z: float, z: int) -> float:
    """In-plane defocus blur applied to a cell's profile at slice z."""
    return cfg.defocus_coefficient * abs(z - cell_z)


def _render(cfg: SynthConfig, cells: list[_Cell], rng: np.random.Generator) -> np.ndarray:
    image = np.full(cfg.dims, cfg.background_level, dtype=np.float64)
    yx_dims = cfg.dims[1:]
    for cell in cells:
        rho = _normalized_distance(cfg.dims, cell.center, cell.radii)
        profile = np.zeros(cfg.dims, dtype=np.float64)
        profile[rho <= 1.0] = cfg.interior_contrast
        profile[(rho > SHELL_INNER_FRACTION) & (rho <= 1.0)] = cfg.membrane_contrast
        for z in range(cfg.dims[0]):
            sl = profile[z]
            if not sl.any():
                continue
            sigma = slice_blur_sigma(cfg, cell.center[0], z)
            if sigma > 1e-6:
                sl = ndimage.gaussian_filter(sl, sigma)
            image[z] += sl.reshape(yx_dims)
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _jitter_annotations(
    cfg: SynthConfig, cells: list[_Cell], labels: np.ndarray, rng: np.random.Generator
) -> CentroidSet:
    dims = np.array(cfg.dims)
    points = []
    for i, cell in enumerate(cells):
        offset = rng.normal(0.0, cfg.centroid_jitter_sigma, size=3)
        point = cell.center.copy()
        for _ in range(40):
            q = np.clip(cell.center + offset, 0, dims - 1)
            voxel = tuple(int(v) for v in np.rint(q))
            if labels[voxel] == i + 1:
                point = q
                break
            offset *= 0.7  # shrink the jitter until it lands inside the cell
        points.append(point)
    return CentroidSet(np.array(points).reshape(-1, 3))


def generate_sample(cfg: SynthConfig, seed=None) -> SynthSample:
    """One synthetic stack plus its ground truth; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    cells, labels = _place_cells(cfg, rng)
    image = _render(cfg, cells, rng)
    annotations = _jitter_annotations(cfg, cells, labels, rng)
    gt_centroids = CentroidSet(
        np.array([c.center for c in cells]).reshape(-1, 3),
    )
    return SynthSample(
        image=Volume(image, cfg.spacing),
        gt_instances=Volume(labels, cfg.spacing),
        gt_centroids=gt_centroids,
        annotations=annotations,
    )


def generate_dataset(cfg: SynthConfig, n_samples: int, out_dir, seed=None) -> DatasetManifest:
    """Write n_samples stacks with annotations and ground truth below
    out_dir, split 4:1 train/validation by sample index; returns the
    manifest (also written as out_dir/manifest.json)."""
    if n_samples < 1:
        raise ValueError("empty dataset: n_samples must be >= 1")
    out_dir = Path(out_dir)
    base_seed = cfg.seed if seed is None else seed
    entries = []
    for i in range(n_samples):
        sample = generate_sample(cfg, seed=[base_seed, i])
        stem = f"sample_{i:03d}"
        write_volume(sample.image, out_dir / "volumes" / f"{stem}.vol")
        write_centroids(sample.annotations, out_dir / "centroids" / f"{stem}.json")
        write_volume(sample.gt_instances, out_dir / "gt" / f"{stem}.vol")
        entries.append(
            ManifestEntry(
                volume=f"volumes/{stem}.vol",
                centroids=f"centroids/{stem}.json",
                gt_instances=f"gt/{stem}.vol",
                split="val" if i % 5 == 4 else "train",
            )
        )
    manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest

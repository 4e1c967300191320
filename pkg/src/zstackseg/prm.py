"""Pseudo labels from peak responses of the trained centre regressor.

Local maxima of the predicted likelihood are backpropagated through the
stage-1 network; each input-gradient map highlights the image evidence
for one peak. Thresholded response masks are unioned into a binary
foreground pseudo label, and peaks are grouped so that several maxima of
one cell count as one putative instance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError, StorageError
from .model import UNet3D, _pad_to_multiple, _input_tensor
from .volio import Volume


@dataclass(frozen=True)
class Peak:
    coord: tuple[float, float, float]  # (z, y, x) voxel coordinates
    score: float


@dataclass(frozen=True)
class PeakSet:
    peaks: list[Peak] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.peaks)

    def coords(self) -> np.ndarray:
        return np.array([p.coord for p in self.peaks], dtype=np.float64).reshape(-1, 3)

    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.peaks], dtype=np.float64)


@dataclass
class PseudoLabelSet:
    foreground: Volume  # uint8 binary mask
    peak_groups: list[list[int]]
    source: str = ""


@dataclass(frozen=True)
class PrmParams:
    peak_threshold: float = 0.5
    min_separation: float = 3.0
    response_threshold: float = 0.2
    group_radius: float = 5.0

    def __post_init__(self):
        if not 0 <= self.peak_threshold <= 1:
            raise ValueError(f"peak_threshold must be in [0,1], got {self.peak_threshold}")
        if self.min_separation < 0 or self.group_radius < 0:
            raise ValueError("separation radii must be >= 0")
        if not 0 < self.response_threshold <= 1:
            raise ValueError(f"response_threshold must be in (0,1], got {self.response_threshold}")


def _strict_local_maxima(data: np.ndarray) -> np.ndarray:
    """Boolean mask of voxels strictly greater than all 26 in-bounds neighbours."""
    padded = np.pad(data.astype(np.float64), 1, mode="constant", constant_values=-np.inf)
    out = np.ones(data.shape, dtype=bool)
    z, y, x = data.shape
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == dy == dx == 0:
                    continue
                neigh = padded[1 + dz : 1 + dz + z, 1 + dy : 1 + dy + y, 1 + dx : 1 + dx + x]
                out &= data > neigh
    return out


def detect_peaks(pred, threshold: float = 0.5, min_separation: float = 3.0) -> PeakSet:
    """Strict 26-neighbourhood maxima above the threshold; of any pair
    closer than min_separation only the higher-valued peak survives (ties
    break to the lower lexicographic coordinate). Sorted by falling score."""
    data = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    maxima = _strict_local_maxima(data)
    coords = np.argwhere(maxima & (data >= threshold))
    candidates = sorted(
        ((float(data[tuple(c)]), tuple(int(v) for v in c)) for c in coords),
        key=lambda sc: (-sc[0], sc[1]),
    )
    kept: list[Peak] = []
    for score, coord in candidates:
        ok = True
        for p in kept:
            d = np.linalg.norm(np.subtract(coord, p.coord))
            if d < min_separation:
                ok = False
                break
        if ok:
            kept.append(Peak(coord=tuple(float(v) for v in coord), score=score))
    return PeakSet(kept)


def peak_response(model: UNet3D, image: Volume, peak) -> Volume:
    """Absolute input gradient of the stage-1 likelihood at one peak voxel,
    scaled to [0, 1] by its maximum (all zero when the gradient vanishes)."""
    if model.config.out_channels != 1:
        raise ConfigError("peak responses need a 1-channel (stage-1) checkpoint")
    coord = tuple(int(round(c)) for c in (peak.coord if isinstance(peak, Peak) else peak))
    for c, d in zip(coord, image.dims):
        if not 0 <= c < d:
            raise ValueError(f"peak {coord} outside volume dims {image.dims}")
    torch.set_num_threads(1)
    model.eval()
    x = _input_tensor(image).reshape(1, 1, *image.dims)
    x, crops = _pad_to_multiple(x, model.config.pad_multiple)
    x.requires_grad_(True)
    out = torch.sigmoid(model(x)[0, 0][crops])
    out[coord].backward()
    grad = x.grad[0, 0][crops].abs().numpy()
    peak_val = grad.max()
    if peak_val <= 0:
        warnings.warn(f"all-zero peak response at {coord}; model output is constant")
        return Volume(np.zeros(image.dims, dtype=np.float32), image.spacing)
    return Volume((grad / peak_val).astype(np.float32), image.spacing)


def single_linkage_groups(coords: np.ndarray, radius: float) -> list[list[int]]:
    """Union-find clusters of points with pairwise chains of distance <= radius."""
    n = coords.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(coords[i] - coords[j]) <= radius:
                ri, rj = find(i), find(j)
            else:
                continue
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def build_pseudo_labels(
    model: UNet3D,
    image: Volume,
    peaks: PeakSet,
    response_threshold: float = 0.2,
    group_radius: float = 5.0,
    source: str = "",
) -> PseudoLabelSet:
    """Union of per-peak response masks (binarized at a fraction of each
    response's max) plus single-linkage peak groups."""
    fg = np.zeros(image.dims, dtype=bool)
    for peak in peaks.peaks:
        resp = peak_response(model, image, peak).data
        m = resp.max()
        if m > 0:
            fg |= resp >= response_threshold * m
    groups = single_linkage_groups(peaks.coords(), group_radius) if len(peaks) else []
    return PseudoLabelSet(
        foreground=Volume(fg.astype(np.uint8), image.spacing),
        peak_groups=groups,
        source=source,
    )


def write_peak_sidecar(labels: PseudoLabelSet, peaks: PeakSet, path) -> None:
    doc = {
        "source": labels.source,
        "peaks": [
            {"z": p.coord[0], "y": p.coord[1], "x": p.coord[2], "score": p.score}
            for p in peaks.peaks
        ],
        "groups": labels.peak_groups,
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write peak sidecar to {path}: {e}") from e


def read_peak_sidecar(path) -> tuple[PeakSet, list[list[int]], str]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise StorageError(f"cannot read peak sidecar from {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    try:
        peaks = PeakSet(
            [Peak(coord=(r["z"], r["y"], r["x"]), score=r["score"]) for r in doc["peaks"]]
        )
        return peaks, [list(map(int, g)) for g in doc["groups"]], doc.get("source", "")
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed peak sidecar: {e}") from e

"""Volume, centroid and manifest I/O.

Volumes travel between pipeline stages in the VOL1 container: a 4-byte
magic, little-endian uint32 header (dtype code, z, y, x), three
little-endian float32 spacing values, then the raw payload in z-major
order. Writes are byte-for-byte deterministic so stage outputs can be
compared across runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StorageError

MAGIC = b"VOL1"

# dtype code <-> numpy dtype, fixed by the file format
_DTYPE_BY_CODE = {0: np.float32, 1: np.uint16, 2: np.uint8}
_CODE_BY_DTYPE = {np.dtype(dt).name: code for code, dt in _DTYPE_BY_CODE.items()}


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid, (z, y, x) order, with per-axis voxel spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D (z, y, x), got ndim={self.data.ndim}")
        if self.data.dtype.name not in _CODE_BY_DTYPE:
            raise ValueError(
                f"unsupported volume dtype {self.data.dtype}, expected float32/uint16/uint8"
            )
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def astype(self, dtype) -> "Volume":
        return Volume(self.data.astype(dtype), self.spacing)


@dataclass(frozen=True)
class CentroidSet:
    """Approximate cell centres in (z, y, x) voxel coordinates."""

    points: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.scores is not None:
            sc = np.asarray(self.scores, dtype=np.float64).ravel()
            if sc.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"scores length {sc.shape[0]} does not match {pts.shape[0]} points"
                )
            object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_inside(self, dims: tuple[int, int, int]) -> None:
        """Raise if any point lies outside the voxel grid [0, dim) per axis."""
        for p in self.points:
            if any(p[i] < 0 or p[i] > dims[i] - 1 for i in range(3)):
                raise ValueError(f"centroid {tuple(p)} outside volume dims {dims}")


def write_volume(v: Volume, path) -> None:
    """Write a VOL1 file; identical volumes produce byte-identical files."""
    path = Path(path)
    code = _CODE_BY_DTYPE[v.data.dtype.name]
    z, y, x = v.dims
    header = MAGIC + struct.pack("<4I", code, z, y, x) + struct.pack("<3f", *v.spacing)
    payload = np.ascontiguousarray(v.data).tobytes(order="C")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise StorageError(f"cannot write volume to {path}: {e}") from e


def read_volume(path) -> Volume:
    """Inverse of write_volume."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read volume from {path}: {e}") from e
    if len(raw) < 32:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    code, z, y, x = struct.unpack("<4I", raw[4:20])
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if min(z, y, x) < 1:
        raise FormatError(f"{path}: non-positive dims ({z}, {y}, {x})")
    spacing = struct.unpack("<3f", raw[20:32])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive spacing {spacing}")
    dtype = np.dtype(_DTYPE_BY_CODE[code])
    nbytes = z * y * x * dtype.itemsize
    payload = raw[32:]
    if len(payload) < nbytes:
        raise FormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {nbytes})"
        )
    if len(payload) > nbytes:
        raise FormatError(
            f"{path}: trailing bytes after payload ({len(payload)} > {nbytes})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(z, y, x).copy()
    return Volume(data, spacing)


def read_centroids(path) -> CentroidSet:
    """Read a centroid annotation file: a JSON array of {z, y, x[, score]}."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise StorageError(f"cannot read centroids from {path}: {e}") from e
    try:
        records = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(records, list):
        raise FormatError(f"{path}: expected a JSON array of centroid records")
    points, scores = [], []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise FormatError(f"{path}: record {i} is not an object")
        try:
            points.append((float(rec["z"]), float(rec["y"]), float(rec["x"])))
        except KeyError as e:
            raise FormatError(f"{path}: record {i} missing key {e}") from e
        except (TypeError, ValueError) as e:
            raise FormatError(f"{path}: record {i} has a non-numeric coordinate") from e
        if "score" in rec:
            scores.append(float(rec["score"]))
    if scores and len(scores) != len(points):
        raise FormatError(f"{path}: 'score' must be present on all records or none")
    pts = np.array(points, dtype=np.float64).reshape(-1, 3)
    return CentroidSet(pts, np.array(scores) if scores else None)


def write_centroids(cs: CentroidSet, path) -> None:
    path = Path(path)
    records = []
    for i, p in enumerate(cs.points):
        rec = {"z": float(p[0]), "y": float(p[1]), "x": float(p[2])}
        if cs.scores is not None:
            rec["score"] = float(cs.scores[i])
        records.append(rec)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write centroids to {path}: {e}") from e


@dataclass
class ManifestEntry:
    """One dataset sample; paths are relative to the manifest root."""

    volume: str
    centroids: str
    gt_instances: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise FormatError(f"manifest entry split must be train/val, got {self.split!r}")

    @property
    def stem(self) -> str:
        return Path(self.volume).stem


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath


def read_manifest(path) -> DatasetManifest:
    """Read a manifest JSON file and check the referenced files exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "entries" not in doc:
        raise FormatError(f"{path}: expected an object with an 'entries' array")
    root = path.parent
    entries = []
    for i, rec in enumerate(doc["entries"]):
        try:
            entry = ManifestEntry(
                volume=rec["volume"],
                centroids=rec["centroids"],
                gt_instances=rec.get("gt_instances"),
                split=rec.get("split", "train"),
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: entry {i} malformed: {e}") from e
        for rel in (entry.volume, entry.centroids, entry.gt_instances):
            if rel is not None and not (root / rel).exists():
                raise FormatError(f"{path}: entry {i} references missing file {rel}")
        entries.append(entry)
    return DatasetManifest(root=root, entries=entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {"entries": []}
    for e in manifest.entries:
        rec = {"volume": e.volume, "centroids": e.centroids, "split": e.split}
        if e.gt_instances is not None:
            rec["gt_instances"] = e.gt_instances
        doc["entries"].append(rec)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write manifest to {path}: {e}") from e

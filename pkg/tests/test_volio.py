import numpy as np
import pytest

from zstackseg.errors import FormatError
from zstackseg.volio import (
    CentroidSet,
    DatasetManifest,
    ManifestEntry,
    Volume,
    read_centroids,
    read_manifest,
    read_volume,
    write_centroids,
    write_manifest,
    write_volume,
)


def test_single_voxel_file_is_36_bytes(tmp_path):
    v = Volume(np.zeros((1, 1, 1), dtype=np.float32))
    path = tmp_path / "one.vol"
    write_volume(v, path)
    assert path.stat().st_size == 36  # 4 magic + 16 header + 12 spacing + 4 payload


@pytest.mark.parametrize("dtype", [np.float32, np.uint16, np.uint8])
def test_roundtrip_identity(tmp_path, rng, dtype):
    for trial in range(20):
        dims = tuple(rng.integers(1, 9, size=3))
        if np.issubdtype(dtype, np.floating):
            data = rng.random(dims, dtype=np.float32)
        else:
            data = rng.integers(0, np.iinfo(dtype).max, size=dims).astype(dtype)
        spacing = tuple(rng.uniform(0.5, 4.0, size=3))
        v = Volume(data, spacing)
        path = tmp_path / f"t{trial}.vol"
        write_volume(v, path)
        back = read_volume(path)
        assert back.dims == v.dims
        assert np.array_equal(back.data, v.data)
        assert back.data.dtype == v.data.dtype
        assert np.allclose(back.spacing, v.spacing, atol=1e-6)  # spacing stored float32
        # file size: 32-byte header + payload
        assert path.stat().st_size == 32 + data.dtype.itemsize * int(np.prod(dims))


def test_writes_are_byte_identical(tmp_path, rng):
    v = Volume(rng.random((4, 8, 8), dtype=np.float32), (2.0, 1.0, 1.0))
    write_volume(v, tmp_path / "a.vol")
    write_volume(v, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.vol"
    good = tmp_path / "good.vol"
    write_volume(Volume(np.zeros((1, 1, 1), dtype=np.float32)), good)
    path.write_bytes(b"VOL0" + good.read_bytes()[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_volume(path)


def test_truncated_payload(tmp_path):
    good = tmp_path / "good.vol"
    write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), good)
    raw = good.read_bytes()
    (tmp_path / "short.vol").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_volume(tmp_path / "short.vol")


def test_unknown_dtype_code(tmp_path):
    good = tmp_path / "good.vol"
    write_volume(Volume(np.zeros((1, 1, 1), dtype=np.float32)), good)
    raw = bytearray(good.read_bytes())
    raw[4] = 9  # dtype code byte
    (tmp_path / "odd.vol").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="dtype code"):
        read_volume(tmp_path / "odd.vol")


def test_volume_validation():
    with pytest.raises(ValueError, match="3D"):
        Volume(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="dtype"):
        Volume(np.zeros((2, 2, 2), dtype=np.float64))
    with pytest.raises(ValueError, match="spacing"):
        Volume(np.zeros((2, 2, 2), dtype=np.float32), (0.0, 1.0, 1.0))


def test_centroids_empty(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("[]")
    cs = read_centroids(path)
    assert len(cs) == 0


def test_centroids_single_record(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('[{"z": 1.0, "y": 2.0, "x": 3.0}]')
    cs = read_centroids(path)
    assert len(cs) == 1
    assert tuple(cs.points[0]) == (1.0, 2.0, 3.0)
    assert cs.scores is None


def test_centroids_missing_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('[{"z": 1.0, "y": 2.0}]')
    with pytest.raises(FormatError, match="missing key"):
        read_centroids(path)


def test_centroids_partial_scores_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('[{"z":0,"y":0,"x":0,"score":0.5},{"z":1,"y":1,"x":1}]')
    with pytest.raises(FormatError, match="score"):
        read_centroids(path)


def test_centroids_roundtrip_preserves_order(tmp_path, rng):
    pts = rng.random((7, 3)) * 10
    scores = rng.random(7)
    cs = CentroidSet(pts, scores)
    path = tmp_path / "c.json"
    write_centroids(cs, path)
    back = read_centroids(path)
    assert np.allclose(back.points, pts)
    assert np.allclose(back.scores, scores)


def test_centroid_bounds_check():
    # valid coordinates span [0, dim-1] so rounding stays indexable
    cs = CentroidSet(np.array([[0.0, 0.0, 5.5]]))
    cs.check_inside((2, 2, 7))
    with pytest.raises(ValueError, match="outside"):
        cs.check_inside((2, 2, 6))


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "v.vol").touch()
    (tmp_path / "c.json").touch()
    m = DatasetManifest(
        root=tmp_path,
        entries=[ManifestEntry(volume="v.vol", centroids="c.json", split="train")],
    )
    write_manifest(m, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert len(back.entries) == 1
    assert back.entries[0].volume == "v.vol"
    assert back.entries[0].gt_instances is None


def test_manifest_missing_file(tmp_path):
    (tmp_path / "manifest.json").write_text(
        '{"entries": [{"volume": "nope.vol", "centroids": "c.json"}]}'
    )
    with pytest.raises(FormatError, match="missing file"):
        read_manifest(tmp_path / "manifest.json")


def test_manifest_bad_split(tmp_path):
    (tmp_path / "v.vol").touch()
    (tmp_path / "c.json").touch()
    (tmp_path / "manifest.json").write_text(
        '{"entries": [{"volume": "v.vol", "centroids": "c.json", "split": "test"}]}'
    )
    with pytest.raises(FormatError, match="split"):
        read_manifest(tmp_path / "manifest.json")

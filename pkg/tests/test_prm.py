import numpy as np
import pytest
import torch

from zstackseg.errors import ConfigError
from zstackseg.model import NetConfig, UNet3D
from zstackseg.prm import (
    Peak,
    PeakSet,
    build_pseudo_labels,
    detect_peaks,
    peak_response,
    read_peak_sidecar,
    single_linkage_groups,
    write_peak_sidecar,
)
from zstackseg.volio import Volume

TINY = NetConfig(depth=2, base_channels=4)


def brute_force_peaks(data, threshold, min_separation):
    """Independent maxima scan plus greedy suppression."""
    dims = data.shape
    candidates = []
    for idx in np.ndindex(*dims):
        if data[idx] < threshold:
            continue
        strict_max = True
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dz == dy == dx == 0:
                        continue
                    nb = (idx[0] + dz, idx[1] + dy, idx[2] + dx)
                    if all(0 <= nb[a] < dims[a] for a in range(3)) and data[nb] >= data[idx]:
                        strict_max = False
        if strict_max:
            candidates.append((float(data[idx]), idx))
    candidates.sort(key=lambda sc: (-sc[0], sc[1]))
    kept = []
    for score, coord in candidates:
        if all(np.linalg.norm(np.subtract(coord, k[1])) >= min_separation for k in kept):
            kept.append((score, coord))
    return kept


def gaussian_bump(dims, center, sigma=2.0, amplitude=0.9):
    grids = np.ogrid[tuple(slice(0, d) for d in dims)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return amplitude * np.exp(-d2 / (2 * sigma * sigma))


def test_single_bump_single_peak():
    pred = gaussian_bump((8, 12, 12), (4, 6, 6))
    peaks = detect_peaks(pred, threshold=0.5)
    assert len(peaks) == 1
    assert peaks.peaks[0].coord == (4.0, 6.0, 6.0)


def test_uniform_volume_no_peaks():
    assert len(detect_peaks(np.full((5, 5, 5), 0.8))) == 0


def test_close_peaks_suppressed():
    pred = np.zeros((3, 3, 9))
    pred[1, 1, 2] = 0.9
    pred[1, 1, 4] = 0.8  # 2 voxels away, inside min_separation 3
    peaks = detect_peaks(pred, threshold=0.5, min_separation=3.0)
    assert len(peaks) == 1
    assert peaks.peaks[0].coord == (1.0, 1.0, 2.0)
    oracle = brute_force_peaks(pred, 0.5, 3.0)
    assert [(p.score, tuple(int(c) for c in p.coord)) for p in peaks.peaks] == oracle


def test_detect_matches_brute_force_oracle(rng):
    from zstackseg.refine import gaussian_smooth

    for trial in range(5):
        raw = rng.random((6, 10, 10))
        data = gaussian_smooth(raw, 1.0)  # structure so maxima are sparse
        data = data / data.max()
        got = detect_peaks(data, threshold=0.3, min_separation=2.5)
        oracle = brute_force_peaks(data, 0.3, 2.5)
        assert [(p.score, tuple(int(c) for c in p.coord)) for p in got.peaks] == oracle


def test_detection_invariant_under_monotone_transform(rng):
    from zstackseg.refine import gaussian_smooth

    data = gaussian_smooth(rng.random((6, 10, 10)), 1.2)
    data = data / data.max()
    base = detect_peaks(data, threshold=0.25, min_separation=2.0)
    squared = detect_peaks(data**2, threshold=0.25**2, min_separation=2.0)
    assert [p.coord for p in base.peaks] == [p.coord for p in squared.peaks]


def test_peaks_sorted_and_separated(rng):
    from zstackseg.refine import gaussian_smooth

    data = gaussian_smooth(rng.random((8, 12, 12)), 1.0)
    data = data / data.max()
    peaks = detect_peaks(data, threshold=0.1, min_separation=3.0)
    scores = [p.score for p in peaks.peaks]
    assert scores == sorted(scores, reverse=True)
    coords = peaks.coords()
    for i in range(len(peaks)):
        for j in range(i + 1, len(peaks)):
            assert np.linalg.norm(coords[i] - coords[j]) >= 3.0


def test_peak_response_normalized(rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    resp = peak_response(model, vol, (4, 8, 8))
    assert resp.data.min() >= 0.0 and resp.data.max() == pytest.approx(1.0)


def test_peak_response_zero_gradient_warns(rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    with torch.no_grad():
        model.head.weight.zero_()  # constant output, zero input gradient
        model.head.bias.zero_()
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    with pytest.warns(UserWarning, match="all-zero"):
        resp = peak_response(model, vol, (4, 8, 8))
    assert (resp.data == 0).all()


def test_peak_response_requires_s1():
    model = UNet3D(NetConfig(depth=1, base_channels=2, out_channels=2))
    with pytest.raises(ConfigError):
        peak_response(model, Volume(np.zeros((2, 2, 2), dtype=np.float32)), (0, 0, 0))


def test_peak_response_bounds_check(rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    with pytest.raises(ValueError, match="outside"):
        peak_response(model, vol, (8, 0, 0))


def brute_single_linkage(coords, radius):
    """Grow clusters by repeated merging until stable."""
    clusters = [{i} for i in range(len(coords))]
    changed = True
    while changed:
        changed = False
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                if any(
                    np.linalg.norm(coords[a] - coords[b]) <= radius
                    for a in clusters[i]
                    for b in clusters[j]
                ):
                    clusters[i] |= clusters[j]
                    del clusters[j]
                    changed = True
                    break
            if changed:
                break
    return sorted(sorted(c) for c in clusters)


def test_two_close_peaks_one_group():
    coords = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 4.0]])
    assert single_linkage_groups(coords, 5.0) == [[0, 1]]


def test_chain_clusters_single_linkage():
    coords = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 4.0], [0.0, 0.0, 8.0]])
    # pairwise distances {4, 4, 8}: the chain joins all three
    got = sorted(sorted(g) for g in single_linkage_groups(coords, 5.0))
    assert got == brute_single_linkage(coords, 5.0) == [[0, 1, 2]]


def test_single_linkage_matches_oracle(rng):
    for _ in range(10):
        coords = rng.random((6, 3)) * 10
        got = sorted(sorted(g) for g in single_linkage_groups(coords, 3.0))
        assert got == brute_single_linkage(coords, 3.0)


def test_pseudo_labels_empty_peaks(rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    labels = build_pseudo_labels(model, vol, PeakSet([]))
    assert (labels.foreground.data == 0).all()
    assert labels.peak_groups == []


def test_pseudo_foreground_is_union_of_masks(rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    peaks = PeakSet([Peak((2.0, 4.0, 4.0), 0.9), Peak((6.0, 12.0, 12.0), 0.8)])
    labels = build_pseudo_labels(model, vol, peaks, response_threshold=0.3)
    union = np.zeros(vol.dims, dtype=bool)
    for p in peaks.peaks:
        r = peak_response(model, vol, p).data
        union |= r >= 0.3 * r.max()
    assert np.array_equal(labels.foreground.data.astype(bool), union)


def test_groups_partition_peaks(rng):
    coords = rng.random((8, 3)) * 12
    groups = single_linkage_groups(coords, 4.0)
    flat = sorted(i for g in groups for i in g)
    assert flat == list(range(8))
    assert len(groups) <= 8


def test_sidecar_roundtrip(tmp_path, rng):
    torch.manual_seed(0)
    model = UNet3D(TINY)
    vol = Volume(rng.random((8, 16, 16), dtype=np.float32))
    peaks = PeakSet([Peak((2.0, 4.0, 4.0), 0.9), Peak((2.0, 4.0, 7.0), 0.8)])
    labels = build_pseudo_labels(model, vol, peaks, group_radius=5.0, source="sample_000")
    write_peak_sidecar(labels, peaks, tmp_path / "p.json")
    back_peaks, back_groups, source = read_peak_sidecar(tmp_path / "p.json")
    assert [p.coord for p in back_peaks.peaks] == [p.coord for p in peaks.peaks]
    assert back_groups == labels.peak_groups == [[0, 1]]
    assert source == "sample_000"

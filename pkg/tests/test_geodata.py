import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepaq.errors import DataError
from deepaq.geodata import (PATCH, GeoRef, PatchDataset, Record, RoadNetwork, Tile, denormalize,
                            extract_patches, load_manifest, load_roads, normalize, patch_center,
                            road_distance, road_distance_many, save_roads, to_chw, write_manifest, write_png)


def dense_distance(point, segments, samples=401, rounds=60):
    """Brute force over sampled segment points, then ternary refinement around the best sample.

    Uses only point evaluation along each segment, no projection formula."""
    p = np.asarray(point, dtype=np.float64)
    a, b = segments[:, 0], segments[:, 1]
    t = np.linspace(0.0, 1.0, samples)
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    d2 = ((pts - p) ** 2).sum(-1)
    k = d2.argmin(axis=1)
    lo = t[np.maximum(k - 1, 0)]
    hi = t[np.minimum(k + 1, samples - 1)]

    def f(tt):
        q = a + tt[:, None] * (b - a)
        return ((q - p) ** 2).sum(-1)

    for _ in range(rounds):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        left = f(m1) < f(m2)
        hi = np.where(left, m2, hi)
        lo = np.where(left, lo, m1)
    return float(np.sqrt(f((lo + hi) / 2).min()))


def random_network(rng, n_segments):
    pts = rng.uniform(-500, 500, (n_segments, 2, 2))
    return RoadNetwork([(s, "major") for s in pts])


def test_distance_examples():
    net = RoadNetwork([([(-5.0, 0.0), (5.0, 0.0)], "major")])
    assert road_distance((0.0, 10.0), net) == 10.0
    assert road_distance((2.5, 0.0), net) == 0.0
    assert road_distance((8.0, 4.0), net) == 5.0


def test_distance_matches_dense_sampling_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        segs = rng.uniform(-500, 500, (100, 2, 2))
        point = rng.uniform(-600, 600, 2)
        got = road_distance(point, RoadNetwork([(s, "major") for s in segs]))
        ref = dense_distance(point, segs)
        worst = max(worst, abs(got - ref) / max(ref, 1e-12))
    assert worst < 1e-6


def test_distance_ignores_minor_and_requires_major():
    net = RoadNetwork([([(0, 0), (10, 0)], "minor"), ([(0, 100), (10, 100)], "major")])
    assert road_distance((5, 0), net) == 100.0
    with pytest.raises(DataError):
        road_distance((0, 0), RoadNetwork([([(0, 0), (1, 1)], "minor")]))


@settings(max_examples=200)
@given(st.integers(0, 2 ** 32 - 1),
       st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)),
       st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)))
def test_distance_is_one_lipschitz(seed, p, q):
    net = random_network(np.random.default_rng(seed), 7)
    dp, dq = road_distance_many([p, q], net)
    assert abs(dp - dq) <= np.hypot(p[0] - q[0], p[1] - q[1]) * (1 + 1e-12) + 1e-9


def test_road_network_validation_and_round_trip(tmp_path):
    with pytest.raises(DataError):
        RoadNetwork([([(0, 0)], "major")])
    with pytest.raises(DataError):
        RoadNetwork([([(0, 0), (np.inf, 1)], "major")])
    with pytest.raises(DataError):
        RoadNetwork([([(0, 0), (1, 1)], "highway")])
    net = random_network(np.random.default_rng(0), 4)
    save_roads(net, tmp_path / "r.json")
    back = load_roads(tmp_path / "r.json")
    for (a, ca), (b, cb) in zip(net.polylines, back.polylines):
        assert ca == cb and np.array_equal(a, b)


def test_patch_extraction_on_random_tiles():
    rng = np.random.default_rng(77)
    for _ in range(20):
        h, w = rng.integers(80, 500, size=2)
        res = float(rng.uniform(0.5, 5.0))
        geo = GeoRef(float(rng.uniform(-1e4, 1e4)), float(rng.uniform(-1e4, 1e4)), res)
        px = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        patches = extract_patches(Tile(px, geo))
        rows, cols = h // 80, w // 80
        assert len(patches) == rows * cols
        covered = np.zeros((h, w), dtype=int)
        for k, p in enumerate(patches):
            i, j = divmod(k, cols)
            assert (p.row, p.col) == (i, j)
            assert p.center == (geo.x0_m + (80 * j + 40) * res, geo.y0_m + (80 * i + 40) * res)
            assert np.array_equal(p.pixels, px[80 * i:80 * i + 80, 80 * j:80 * j + 80])
            covered[80 * i:80 * i + 80, 80 * j:80 * j + 80] += 1
        # a partition of the cropped stride-80 region
        assert np.all(covered[:rows * 80, :cols * 80] == 1)
        assert covered[rows * 80:].sum() == 0 and covered[:, cols * 80:].sum() == 0


def test_patch_extraction_examples():
    geo = GeoRef(0.0, 0.0, 2.5)
    assert len(extract_patches(Tile(np.zeros((400, 400, 3), np.uint8), geo))) == 25
    assert len(extract_patches(Tile(np.zeros((100, 100, 3), np.uint8), geo))) == 1
    assert patch_center(geo, 0, 0) == (100.0, 100.0)
    with pytest.raises(DataError):
        Tile(np.zeros((79, 200, 3), np.uint8), geo)
    with pytest.raises(DataError):
        GeoRef(0, 0, 0.0)


def test_normalization_round_trip_and_endpoints():
    x = np.arange(256, dtype=np.uint8)
    v = normalize(x)
    assert v[0] == -1.0 and v[255] == 1.0
    assert np.array_equal(denormalize(v), x)
    assert np.all(np.diff(v) > 0)
    np.testing.assert_allclose(np.diff(v.astype(np.float64)), 1 / 127.5, rtol=1e-5)


def test_to_chw_layout():
    px = np.random.default_rng(0).integers(0, 256, (2, 80, 80, 3), dtype=np.uint8)
    out = to_chw(px)
    assert out.shape == (2, 3, 80, 80) and out.dtype == np.float32
    assert out[1, 2, 5, 7] == normalize(px[1, 5, 7, 2])


def _write_dataset(root, n=3, labels=(12.5, None, 0.0)):
    rng = np.random.default_rng(1)
    recs = []
    for k in range(n):
        rel = f"p{k}.png"
        write_png(rng.integers(0, 256, (80, 80, 3), dtype=np.uint8), root / rel)
        recs.append(Record(f"p{k}", rel, "source" if k % 2 == 0 else "target", labels[k],
                           GeoRef(200.0 * k, 0.0, 2.5), None if k == 1 else 50.0 * k))
    write_manifest(recs, root / "m.jsonl")
    return recs


def test_manifest_round_trip(tmp_path):
    recs = _write_dataset(tmp_path)
    ds = load_manifest(tmp_path / "m.jsonl")
    assert [r.to_dict() for r in ds.records] == [r.to_dict() for r in recs]
    assert len(ds) == 3 and ds.ids == ["p0", "p1", "p2"]
    assert list(ds.labeled) == [True, False, True]
    samples = list(ds)
    assert samples[1].label is None and samples[0].label == 12.5
    assert samples[0].patch.shape == (3, 80, 80)
    assert samples[0].center == (40 * 2.5, 40 * 2.5)
    write_manifest(ds, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == (tmp_path / "m.jsonl").read_bytes()


@pytest.mark.parametrize("mutate,needle", [
    (lambda r: r.update(domain="validation"), "domain"),
    (lambda r: r.update(label_no2=-1.0), "negative"),
    (lambda r: r.update(image="missing.png"), "not found"),
    (lambda r: r.pop("geo"), "geo"),
    (lambda r: r.update(label_no2="high"), "label_no2"),
])
def test_manifest_validation_names_record(tmp_path, mutate, needle):
    _write_dataset(tmp_path)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    rec = json.loads(lines[2])
    mutate(rec)
    lines[2] = json.dumps(rec)
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=f"record 2.*{needle}"):
        load_manifest(tmp_path / "m.jsonl")


def test_malformed_json_line(tmp_path):
    _write_dataset(tmp_path)
    with open(tmp_path / "m.jsonl", "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(DataError, match="record 3"):
        load_manifest(tmp_path / "m.jsonl")


def test_large_unlabeled_image_expands_to_patches(tmp_path):
    write_png(np.zeros((170, 250, 3), np.uint8), tmp_path / "big.png")
    write_manifest([Record("big", "big.png", "target", None, GeoRef(0, 0, 2.5))], tmp_path / "m.jsonl")
    ds = load_manifest(tmp_path / "m.jsonl")
    assert len(ds) == 6 and ds.ids[4] == "big/1_1"
    assert tuple(ds.centers[4]) == (300.0, 300.0)
    assert ds.pixels().shape == (6, 80, 80, 3)


def test_attach_roads_and_labels(tmp_path):
    _write_dataset(tmp_path)
    ds = load_manifest(tmp_path / "m.jsonl")
    net = RoadNetwork([([(0.0, 0.0), (1000.0, 0.0)], "major")])
    ds.attach_roads(net)
    assert ds.road_dist_m[1] == 100.0 and ds.road_dist_m[2] == 100.0  # record value kept for p2
    ds.attach_labels({"p0": 1.0, "p1": 2.0, "p2": 3.0})
    assert list(ds.labels) == [1.0, 2.0, 3.0]
    with pytest.raises(DataError):
        ds.attach_labels({"p0": 1.0})
    sub = ds.subset([2, 0])
    assert sub.ids == ["p2", "p0"] and list(sub.labels) == [3.0, 1.0]
    assert isinstance(sub, PatchDataset)

"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criteria 3, 4 and 7 share nine full benchmark runs (3 seeds x dann / baseline / dann without
roads) and take about an hour on one CPU core."""
import hashlib
import time

import numpy as np
import pytest

from deepaq import checkpoint
from deepaq import tensor as T
from deepaq.explain import cam_from_activations, grad_cam, road_pixel_mask, road_saliency_ratio
from deepaq.geodata import GeoRef, RoadNetwork, Tile, extract_patches, load_manifest, load_roads, road_distance, to_chw
from deepaq.metrics import r2, sigma_nrmse
from deepaq.model import ModelConfig
from deepaq.synthcity import MAJOR_HALF_WIDTH_PX, RES_M, make_benchmark, read_labels_csv
from deepaq.train import TrainConfig, evaluate, train
from fdcheck import check_op, numeric_grad, rel_error
from test_geodata import dense_distance
from test_model import _encoder_domain_grads, composite_error, tiny_bundle
from test_tensor import OPS

SEEDS = (1, 2, 3)
CPU_MINUTES_PER_RUN = 30.0


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_correctness(criterion):
    start = time.perf_counter()
    op_worst = 0.0
    for seed in range(5):
        for name, build, make in OPS:
            rng = np.random.default_rng(1000 + seed)
            op_worst = max(op_worst, check_op(build, make(rng), rng))
        # reversal: the analytic gradient is -lambda times the finite difference of the identity forward
        rng = np.random.default_rng(2000 + seed)
        x0, w = rng.standard_normal((2, 5)), rng.standard_normal((5, 3))
        x = T.Tensor(x0.copy(), requires_grad=True)
        T.backward(T.tensor_sum(T.sigmoid(T.grad_reverse(x, 0.7) @ T.Tensor(w))))
        fd = numeric_grad(lambda: float(np.sum(1 / (1 + np.exp(-(x0 @ w))))), x0)
        op_worst = max(op_worst, rel_error(x.grad, -0.7 * fd))
    comp_worst = max(composite_error(seed) for seed in range(5))
    seconds = time.perf_counter() - start
    ok = op_worst < 1e-6 and comp_worst < 1e-5 and seconds < 60
    criterion.record(ok, f"{len(OPS) + 1} ops x 5 seeds max rel err {op_worst:.2e} (< 1e-6); "
                         f"composite max rel err {comp_worst:.2e} (< 1e-5); {seconds:.1f}s (< 60s)")


@pytest.mark.criterion(2, "gradient-reversal identity")
def test_gradient_reversal_identity(criterion):
    details, ok = [], True
    for lam in (0.0, 0.3, 1.0):
        bundle = tiny_bundle(3)
        x = np.random.default_rng(4).uniform(-1, 1, (6, 3, 8, 8))
        e_rev, g_rev = _encoder_domain_grads(bundle, x, lam, True)
        e_id, g_id = _encoder_domain_grads(bundle, x, lam, False)
        exact = np.array_equal(e_rev, e_id * np.float64(-lam))
        # below the reversal point the chain rule reassociates the product, so compare to rounding
        param_err = max(rel_error(g_rev[n], -lam * g_id[n]) for n in g_id)
        ok &= exact and param_err < 1e-12
        details.append(f"lambda={lam}: embedding grad bit-exact={exact}, encoder params rel err {param_err:.1e}")
    criterion.record(ok, "; ".join(details))


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    """Per seed: target metrics for dann, baseline and dann without roads, plus the dann model."""
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in SEEDS:
        paths = make_benchmark(seed, root / f"bench{seed}")
        source = load_manifest(paths.source_manifest)
        target = load_manifest(paths.target_manifest)
        sealed = read_labels_csv(paths.sealed_labels)
        scored = load_manifest(paths.target_manifest).attach_labels(sealed)
        for mode, roads in (("dann", "scalar_concat"), ("baseline", "scalar_concat"), ("dann", "off")):
            config = TrainConfig(mode=mode, seed=seed, road_feature_mode=roads)
            cpu = time.process_time()
            model, _ = train(config, source, target)
            cpu_min = (time.process_time() - cpu) / 60
            rep, _ = evaluate(model, scored)
            key = mode if roads != "off" else "dann_no_roads"
            runs[seed, key] = {"r2": rep.r2_det, "nrmse": rep.sigma_nrmse, "cpu_min": cpu_min,
                               "n_source": len(source), "n_target": len(target)}
            if key == "dann":
                runs[seed, "model"] = model
                runs[seed, "paths"] = paths
                runs[seed, "sealed"] = sealed
    return runs


@pytest.mark.slow
@pytest.mark.criterion(3, "adaptation gain")
def test_adaptation_gain(criterion, benchmark_runs):
    r = benchmark_runs
    d_r2 = [r[s, "dann"]["r2"] - r[s, "baseline"]["r2"] for s in SEEDS]
    d_nrmse = [r[s, "baseline"]["nrmse"] - r[s, "dann"]["nrmse"] for s in SEEDS]
    per_seed = all(a > 0 and b > 0 for a, b in zip(d_r2, d_nrmse))
    slowest = max(v["cpu_min"] for k, v in r.items() if isinstance(v, dict) and "cpu_min" in v)
    sizes = {(r[s, "dann"]["n_source"], r[s, "dann"]["n_target"]) for s in SEEDS}
    ok = np.mean(d_r2) >= 0.10 and np.mean(d_nrmse) >= 0.05 and per_seed and slowest <= CPU_MINUTES_PER_RUN
    table = ", ".join(f"seed {s}: r2 {r[s, 'dann']['r2']:.3f} vs {r[s, 'baseline']['r2']:.3f}, "
                      f"nrmse {r[s, 'dann']['nrmse']:.3f} vs {r[s, 'baseline']['nrmse']:.3f}" for s in SEEDS)
    criterion.record(ok, f"mean r2 gain {np.mean(d_r2):.3f} (>= 0.10), mean nrmse drop {np.mean(d_nrmse):.3f} "
                         f"(>= 0.05), every seed ordered: {per_seed}; {table}; patches {sorted(sizes)}; "
                         f"slowest run {slowest:.1f} CPU-min")


@pytest.mark.slow
@pytest.mark.criterion(4, "road-feature ablation")
def test_road_feature_ablation(criterion, benchmark_runs):
    r = benchmark_runs
    with_roads = [r[s, "dann"]["r2"] for s in SEEDS]
    without = [r[s, "dann_no_roads"]["r2"] for s in SEEDS]
    strict = sum(a > b for a, b in zip(with_roads, without))
    ok = np.mean(with_roads) >= np.mean(without) and strict >= 2
    criterion.record(ok, f"target r2 with roads {np.round(with_roads, 3).tolist()} (mean {np.mean(with_roads):.3f}), "
                         f"without {np.round(without, 3).tolist()} (mean {np.mean(without):.3f}); "
                         f"strictly better on {strict}/3 seeds")


@pytest.mark.criterion(5, "metric identity")
def test_metric_identity(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        t = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), n)
        p = t + rng.normal(0, rng.uniform(0.01, 30), n)
        worst = max(worst, abs(r2(p, t) - (1 - sigma_nrmse(p, t) ** 2)))
    null = 0.0
    for _ in range(100):
        t = rng.uniform(0, 100, int(rng.integers(2, 500)))
        p = np.full_like(t, t.mean())
        null = max(null, abs(sigma_nrmse(p, t) - 1.0), abs(r2(p, t)))
    criterion.record(worst < 1e-9 and null < 1e-12,
                     f"max |r2 - (1 - nrmse^2)| = {worst:.1e} over 1000 vectors (< 1e-9); "
                     f"mean predictor max deviation from (1, 0) = {null:.1e} (< 1e-12)")


@pytest.fixture(scope="module")
def small_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return make_benchmark(5, root / "a", tiles=2, tile_px=400), make_benchmark(5, root / "b", tiles=2, tile_px=400)


def _small_config():
    return TrainConfig(epochs=2, batch_size=8, seed=5, model=ModelConfig(embedding_dim=32, head_hidden=16))


@pytest.mark.criterion(6, "unsupervised contract")
def test_unsupervised_contract(criterion, small_bench, tmp_path):
    paths, _ = small_bench
    source = load_manifest(paths.source_manifest)
    labeled = load_manifest(paths.target_manifest).attach_labels(read_labels_csv(paths.sealed_labels))
    stripped = load_manifest(paths.target_manifest).attach_labels(read_labels_csv(paths.sealed_labels))
    stripped.strip_labels()
    train(_small_config(), source, labeled, out_path=tmp_path / "labeled.daqc")
    train(_small_config(), source, stripped, out_path=tmp_path / "stripped.daqc")
    same = (tmp_path / "labeled.daqc").read_bytes() == (tmp_path / "stripped.daqc").read_bytes()
    criterion.record(same and labeled.labeled.all() and not stripped.labeled.any(),
                     f"checkpoint with target labels present == with labels stripped: {same}")


@pytest.mark.slow
@pytest.mark.criterion(7, "Grad-CAM")
def test_grad_cam(criterion, benchmark_runs):
    A = T.Tensor(np.array([[[1.0, -1.0], [2.0, 0.0]]]), requires_grad=True)
    A.retain_grad()
    T.backward(T.tensor_sum(A))
    hand = np.array_equal(cam_from_activations(A.data, A.grad), [[1.0, 0.0], [2.0, 0.0]])

    model, paths, sealed = (benchmark_runs[1, k] for k in ("model", "paths", "sealed"))
    target = load_manifest(paths.target_manifest)
    roads = load_roads(paths.target_roads)
    labels = np.array([sealed[i] for i in target.ids])
    top = np.flatnonzero(labels >= np.quantile(labels, 0.9))
    pixels = target.pixels()
    maps, masks = [], []
    for k in top:
        maps.append(grad_cam(model, to_chw(pixels[k]), road_dist_m=float(target.road_dist_m[k])))
        cx, cy = target.centers[k]
        corner = GeoRef(cx - 40 * RES_M, cy - 40 * RES_M, RES_M)
        masks.append(road_pixel_mask(corner, roads, MAJOR_HALF_WIDTH_PX * RES_M))
    non_negative = all(np.all(m.values >= 0) for m in maps)
    ratio, counted = road_saliency_ratio(maps, masks)
    ok = hand and non_negative and ratio > 1.0 and counted >= 100
    criterion.record(ok, f"hand 2x2 exact: {hand}; {len(maps)} maps non-negative: {non_negative}; "
                         f"road-pixel saliency ratio {ratio:.3f} (> 1.0) over {counted} top-decile patches (>= 100)")


@pytest.mark.criterion(8, "determinism and persistence")
def test_determinism_and_persistence(criterion, small_bench, tmp_path):
    a, b = small_bench
    same_data = tree_digest(a.root) == tree_digest(b.root)
    source = load_manifest(a.source_manifest)
    target = load_manifest(a.target_manifest)
    m1, _ = train(_small_config(), source, target, out_path=tmp_path / "a.daqc")
    train(_small_config(), source, target, out_path=tmp_path / "b.daqc")
    same_ckpt = (tmp_path / "a.daqc").read_bytes() == (tmp_path / "b.daqc").read_bytes()
    scored = load_manifest(a.target_manifest).attach_labels(read_labels_csv(a.sealed_labels))
    loaded, _ = checkpoint.load(tmp_path / "a.daqc")
    rep1, pred1 = evaluate(m1, scored)
    rep2, pred2 = evaluate(loaded, scored)
    same_metrics = rep1.to_json() == rep2.to_json() == evaluate(loaded, scored)[0].to_json()
    same_pred = pred1.tobytes() == pred2.tobytes()
    criterion.record(same_data and same_ckpt and same_metrics and same_pred,
                     f"dataset bytes equal: {same_data}; checkpoint bytes equal: {same_ckpt}; "
                     f"metrics JSON equal: {same_metrics}; round-trip inference bit-identical: {same_pred}")


@pytest.mark.criterion(9, "geometry oracles")
def test_geometry_oracles(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        segs = rng.uniform(-500, 500, (100, 2, 2))
        point = rng.uniform(-600, 600, 2)
        got = road_distance(point, RoadNetwork([(s, "major") for s in segs]))
        ref = dense_distance(point, segs)
        worst = max(worst, abs(got - ref) / max(ref, 1e-12))
    tiles_ok = 0
    rng = np.random.default_rng(77)
    for _ in range(20):
        h, w = (int(v) for v in rng.integers(80, 500, size=2))
        res = float(rng.uniform(0.5, 5.0))
        geo = GeoRef(float(rng.uniform(-1e4, 1e4)), float(rng.uniform(-1e4, 1e4)), res)
        patches = extract_patches(Tile(np.zeros((h, w, 3), np.uint8), geo))
        cols = w // 80
        ok = len(patches) == (h // 80) * cols and all(
            p.center == (geo.x0_m + (80 * (k % cols) + 40) * res, geo.y0_m + (80 * (k // cols) + 40) * res)
            for k, p in enumerate(patches))
        tiles_ok += ok
    criterion.record(worst < 1e-6 and tiles_ok == 20,
                     f"road distance max rel err {worst:.1e} vs dense sampling on 1000 sets (< 1e-6); "
                     f"patch counts and centers match on {tiles_ok}/20 tiles")

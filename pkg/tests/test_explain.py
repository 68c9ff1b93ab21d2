import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepaq import tensor as T
from deepaq.errors import ConfigError
from deepaq.explain import (SaliencyMap, cam_from_activations, colormap, grad_cam, render_saliency,
                            road_pixel_mask, road_saliency_ratio, upsample_bilinear)
from deepaq.model import ModelBundle, ModelConfig


def test_hand_derived_two_by_two():
    # output = c * sum(A) with K = 1: the gradient is c everywhere, so alpha = c
    c = 1.0
    A = T.Tensor(np.array([[[1.0, -1.0], [2.0, 0.0]]]), requires_grad=True)
    A.retain_grad()
    T.backward(T.tensor_sum(A) * c)
    cam = cam_from_activations(A.data, A.grad)
    np.testing.assert_array_equal(cam, [[1.0, 0.0], [2.0, 0.0]])


def test_weights_are_spatial_mean_of_gradient():
    A = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.5], [-1.0, 2.0]]])
    G = np.array([[[1.0, 3.0], [0.0, 0.0]], [[-2.0, -2.0], [-2.0, -2.0]]])
    alpha = np.array([1.0, -2.0])
    np.testing.assert_array_equal(cam_from_activations(A, G), np.maximum(alpha[0] * A[0] + alpha[1] * A[1], 0))


def test_bilinear_upsample_properties():
    g = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = upsample_bilinear(g, 80, 80)
    assert up.shape == (80, 80)
    assert up[0, 0] == 0.0 and up[-1, -1] == 3.0
    np.testing.assert_allclose(up.mean(), g.mean())
    np.testing.assert_array_equal(upsample_bilinear(np.full((5, 5), 2.5), 80, 80), 2.5)
    np.testing.assert_array_equal(upsample_bilinear(g, 2, 2), g)


@pytest.fixture(scope="module")
def model():
    b = ModelBundle.create(ModelConfig(), seed=3)
    b.decoder.out_shift[:] = 20.0
    b.decoder.out_scale[:] = 10.0
    b.eval()
    return b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_maps_non_negative_and_full_size(model, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (3, 80, 80)).astype(np.float32)
    sal = grad_cam(model, x, road_dist_m=120.0)
    assert sal.values.shape == (80, 80)
    assert np.all(sal.values >= 0)
    assert sal.layer == model.encoder.last_conv_layer()


def test_default_and_named_layers(model):
    x = np.random.default_rng(0).uniform(-1, 1, (3, 80, 80)).astype(np.float32)
    assert grad_cam(model, x, road_dist_m=50.0).coarse.shape == (5, 5)
    assert grad_cam(model, x, "stage1.1", road_dist_m=50.0).coarse.shape == (10, 10)
    with pytest.raises(ConfigError, match="valid layers.*stem"):
        grad_cam(model, x, "stage9.conv", road_dist_m=50.0)


def test_detached_output_gives_zero_map():
    b = ModelBundle.create(ModelConfig(), seed=0)
    b.decoder.fc2.weight.data[:] = 0
    b.eval()
    x = np.random.default_rng(0).uniform(-1, 1, (3, 80, 80)).astype(np.float32)
    assert np.all(grad_cam(b, x, road_dist_m=10.0).values == 0)


def test_constant_output_shift_does_not_change_map(model):
    x = np.random.default_rng(5).uniform(-1, 1, (3, 80, 80)).astype(np.float32)
    a = grad_cam(model, x, road_dist_m=75.0).values
    model.decoder.out_shift[:] += 37.0
    try:
        b = grad_cam(model, x, road_dist_m=75.0).values
    finally:
        model.decoder.out_shift[:] -= 37.0
    assert a.tobytes() == b.tobytes()


def test_grad_cam_leaves_model_clean(model):
    x = np.zeros((3, 80, 80), np.float32)
    grad_cam(model, x, road_dist_m=75.0)
    assert all(p.grad is None for p in model.parameters())
    assert not model.training


def test_render_zero_map_is_plain_patch():
    px = np.random.default_rng(0).integers(0, 256, (80, 80, 3), dtype=np.uint8)
    out = render_saliency(SaliencyMap(np.zeros((80, 80)), "p", "l"), px)
    assert out.tobytes() == px.tobytes()


def test_render_peak_is_hottest_and_deterministic():
    px = np.zeros((80, 80, 3), np.uint8)
    vals = np.zeros((80, 80))
    vals[10, 20] = 4.0
    vals[30, 30] = 1.0
    sal = SaliencyMap(vals, "p", "l")
    out = render_saliency(sal, px)
    hot = np.rint(0.5 * colormap(1.0)).astype(np.uint8)
    np.testing.assert_array_equal(out[10, 20], hot)
    assert out.tobytes() == render_saliency(sal, px).tobytes()
    # float patches in [-1, 1], channels first, are accepted too
    assert render_saliency(sal, np.full((3, 80, 80), -1.0, np.float32)).tobytes() == out.tobytes()


def test_saliency_map_rejects_negative_and_writes_csv(tmp_path):
    with pytest.raises(ValueError):
        SaliencyMap(np.array([[-0.1]]), "p", "l")
    sal = SaliencyMap(np.arange(6, dtype=float).reshape(2, 3), "p", "l")
    sal.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "0,1,2\n3,4,5\n"


def test_road_ratio_helper():
    v = np.ones((4, 4))
    v[0] = 3.0
    mask = np.zeros((4, 4), bool)
    mask[0] = True
    ratio, n = road_saliency_ratio([v, np.zeros((4, 4))], [mask, mask])
    assert n == 1 and ratio == pytest.approx(3.0 / 1.5)


def test_road_pixel_mask_matches_layout_major_class():
    from deepaq.geodata import GeoRef
    from deepaq.synthcity import MAJOR, MAJOR_HALF_WIDTH_PX, RES_M, SyntheticWorldSpec, generate_layout
    layout = generate_layout(SyntheticWorldSpec(seed=8, size_px=160))
    mask = road_pixel_mask(GeoRef(80 * RES_M, 0.0, RES_M), layout.roads, MAJOR_HALF_WIDTH_PX * RES_M)
    assert mask.sum() > 500
    np.testing.assert_array_equal(mask, layout.classes[:80, 80:160] == MAJOR)

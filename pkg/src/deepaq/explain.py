"""Grad-CAM attribution for the scalar NO2 output."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .geodata import PATCH, denormalize, road_distance_many

BLEND = 0.5

# piecewise-linear blue -> cyan -> yellow -> red ramp
_STOPS = np.array([0.0, 0.35, 0.65, 1.0])
_COLORS = np.array([[0, 0, 160], [0, 200, 255], [255, 230, 0], [220, 0, 0]], dtype=np.float64)


def colormap(values):
    """[...] floats in [0, 1] -> [..., 3] float RGB in [0, 255]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, _STOPS, _COLORS[:, c]) for c in range(3)], axis=-1)


@dataclass
class SaliencyMap:
    values: np.ndarray
    patch_id: str
    layer: str
    coarse: np.ndarray = None

    def __post_init__(self):
        if (self.values < 0).any():
            raise ValueError("saliency values must be non-negative")

    def normalized(self):
        peak = float(self.values.max()) if self.values.size else 0.0
        return self.values / peak if peak > 0 else np.zeros_like(self.values)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.values:
                w.writerow([f"{v:.9g}" for v in row])


def cam_from_activations(activations, grads):
    """Weights are the spatial mean of the output gradient per channel.

    activations, grads: [K, h, w]. Returns ReLU(sum_k alpha_k A^k) as [h, w]."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ShapeError(f"activations {a.shape} and gradients {g.shape} must both be [K, h, w]")
    alpha = g.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, a, axes=1), 0.0)


def upsample_bilinear(grid, out_h, out_w):
    """Half-pixel-centred bilinear resize with edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def grad_cam(model, patch, layer=None, road_dist_m=None, patch_id=""):
    """Saliency of the NO2 output for one float patch [3, 80, 80] (or [1, 3, 80, 80])."""
    x = np.asarray(patch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"grad_cam takes a single patch, got shape {list(x.shape)}")
    layer = layer or model.encoder.last_conv_layer()
    road = None if road_dist_m is None else np.asarray([road_dist_m], dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        capture = {layer: None}
        inp = model.prepare_input(x.astype(np.float32), road)
        out = model.predict_no2(model.encode(inp, capture=capture), model.road_input(road))
        act = capture[layer]
        T.backward(T.tensor_sum(out))
        grads = act.grad if act.grad is not None else np.zeros_like(act.data)
        coarse = cam_from_activations(act.data[0], grads[0])
    finally:
        model.zero_grad()
        model.train(was_training)
    values = upsample_bilinear(coarse, x.shape[2], x.shape[3])
    return SaliencyMap(np.maximum(values, 0.0), patch_id, layer, coarse)


def render_saliency(saliency, patch):
    """8-bit RGB overlay of a saliency map on a patch.

    ``patch`` is uint8 [H, W, 3] or normalized float [3, H, W]."""
    p = np.asarray(patch)
    if p.dtype != np.uint8:
        p = denormalize(np.transpose(p, (1, 2, 0)) if p.shape[0] == 3 else p)
    values = saliency.normalized() if isinstance(saliency, SaliencyMap) else _norm(saliency)
    if values.shape != p.shape[:2]:
        raise ShapeError(f"map {values.shape} does not match patch {p.shape[:2]}")
    w = (BLEND * values)[..., None]
    out = p.astype(np.float64) * (1.0 - w) + colormap(values) * w
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _norm(values):
    v = np.asarray(values, dtype=np.float64)
    peak = v.max() if v.size else 0.0
    return v / peak if peak > 0 else np.zeros_like(v)


def road_pixel_mask(geo, roads, half_width_m, size=PATCH):
    """Boolean size x size mask of pixels whose centers lie within ``half_width_m`` of a major road."""
    offs = (np.arange(size) + 0.5) * geo.res_m_per_px
    xs, ys = np.meshgrid(geo.x0_m + offs, geo.y0_m + offs)
    d = road_distance_many(np.stack([xs.ravel(), ys.ravel()], axis=1), roads)
    return (d <= half_width_m).reshape(size, size)


def road_saliency_ratio(maps, road_masks):
    """Mean saliency on road pixels over mean saliency on all pixels, averaged over patches.

    Patches without road pixels or with an all-zero map are skipped."""
    ratios = []
    for m, mask in zip(maps, road_masks):
        v = m.values if isinstance(m, SaliencyMap) else np.asarray(m)
        if not mask.any() or v.mean() <= 0:
            continue
        ratios.append(v[mask].mean() / v.mean())
    return float(np.mean(ratios)) if ratios else float("nan"), len(ratios)


__all__ = ["SaliencyMap", "grad_cam", "cam_from_activations", "render_saliency", "upsample_bilinear",
           "road_saliency_ratio", "road_pixel_mask", "colormap", "PATCH"]

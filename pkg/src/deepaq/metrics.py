"""Evaluation metrics: sigma-normalized RMSE and two flavours of R^2."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise DataError(f"prediction length {p.size} != target length {t.size}")
    if p.size < 2:
        raise DataError(f"need at least 2 samples, got {p.size}")
    if not (np.isfinite(p).all() and np.isfinite(t).all()):
        raise DataError("predictions and targets must be finite")
    return p, t


def _target_std(t):
    sd = float(np.sqrt(np.mean((t - t.mean()) ** 2)))
    if sd == 0.0:
        raise DataError("target is constant; sigma-normalized metrics are undefined")
    return sd


def sigma_nrmse(pred, target):
    """RMSE divided by the population standard deviation of the targets."""
    p, t = _pair(pred, target)
    sd = _target_std(t)
    return float(np.sqrt(np.mean((p - t) ** 2)) / sd)


def r2(pred, target, variant="det"):
    """``det``: 1 - SS_res/SS_tot. ``corr``: squared Pearson correlation."""
    p, t = _pair(pred, target)
    _target_std(t)
    if variant == "det":
        ss_res = np.sum((t - p) ** 2)
        ss_tot = np.sum((t - t.mean()) ** 2)
        return float(1.0 - ss_res / ss_tot)
    if variant == "corr":
        pc = p - p.mean()
        if not np.any(pc):
            raise DataError("prediction is constant; correlation R^2 is undefined")
        tc = t - t.mean()
        r = np.sum(pc * tc) / np.sqrt(np.sum(pc * pc) * np.sum(tc * tc))
        return float(min(1.0, r * r))
    raise DataError(f"unknown R^2 variant {variant!r}")


@dataclass
class MetricsReport:
    sigma_nrmse: float
    r2_det: float
    r2_corr: float
    n: int
    bins: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({"sigma_nrmse": self.sigma_nrmse, "r2_det": self.r2_det,
                           "r2_corr": self.r2_corr, "n": self.n}, indent=2, sort_keys=True) + "\n"


def residual_bins(pred, target, n_bins=5):
    """Residual summary per target-quantile bin."""
    p, t = _pair(pred, target)
    edges = np.quantile(t, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        m = idx == b
        if not m.any():
            continue
        r = p[m] - t[m]
        out.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "count": int(m.sum()),
                    "mean_residual": float(r.mean()), "rmse": float(np.sqrt(np.mean(r * r)))})
    return out


def report(pred, target):
    p, t = _pair(pred, target)
    try:
        rc = r2(p, t, "corr")
    except DataError:
        rc = 0.0
    return MetricsReport(sigma_nrmse(p, t), r2(p, t, "det"), rc, int(p.size), residual_bins(p, t))


def write_residuals_csv(ids, pred, target, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "target", "pred", "residual"])
        for i, p, t in zip(ids, pred, target):
            w.writerow([i, repr(float(t)), repr(float(p)), repr(float(p - t))])

"""Domain-adversarial training loop and the no-adaptation baseline."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from . import tensor as T
from .errors import ConfigError, DataError, NumericFault
from .geodata import PATCH, Tile, extract_patches, road_distance_many, to_chw
from .metrics import r2, report, sigma_nrmse
from .model import ModelBundle, ModelConfig
from .nn import Adam, domain_bce, euclidean_loss

log = logging.getLogger(__name__)

MODES = ("dann", "baseline")
SCHEDULES = ("ganin", "constant")
LR_SCHEDULES = ("anneal", "constant")


@dataclass
class TrainConfig:
    mode: str = "dann"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "anneal"
    lambda_schedule: str = "ganin"
    lambda_value: float = 1.0
    gamma: float = 10.0
    seed: int = 0
    deterministic: bool = True
    road_feature_mode: str = "scalar_concat"
    checkpoint_every: int = 0
    val_fraction: float = 0.1
    critic_updates: bool = True
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_schedule not in SCHEDULES:
            raise ConfigError(f"lambda schedule must be one of {SCHEDULES}, got {self.lambda_schedule!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if not (self.lambda_value >= 0 and math.isfinite(self.lambda_value)):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lambda_value}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        self.model_config().validate()
        return self

    def model_config(self):
        return dataclasses.replace(self.model, road_feature_mode=self.road_feature_mode)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(model=model, **{k: v for k, v in d.items() if k in names})


def ganin_lambda(progress, gamma=10.0):
    """2 / (1 + exp(-gamma * p)) - 1 for training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


def lr_at(config, progress):
    """lr / (1 + 10 p)^0.75 when annealing, else the constant lr."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr / (1.0 + 10.0 * progress) ** 0.75


def lambda_at(config, progress):
    if config.mode == "baseline":
        return 0.0
    if config.lambda_schedule == "constant":
        return config.lambda_value
    return config.lambda_value * ganin_lambda(progress, config.gamma)


@dataclass
class EpochRecord:
    epoch: int
    reg_loss: float
    dom_loss: float
    critic_acc: float
    val_sigma_nrmse: float
    val_r2: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f.name for f in dataclasses.fields(EpochRecord)])
            for r in self.records:
                w.writerow([r.epoch] + [f"{getattr(r, f.name):.6g}" for f in dataclasses.fields(EpochRecord)[1:]])

    def summary(self, config):
        last = self.records[-1] if self.records else None
        return {"epochs": len(self.records), "config": config.to_dict(),
                "final": asdict(last) if last else None}


def _check_count(n, what):
    if n == 0:
        raise DataError(f"{what} dataset is empty")


def paired_batches(n_source, n_target, batch_size, rng):
    """One epoch of (source index batch, target index batch) pairs.

    The larger side is a permutation; the smaller one is resampled with
    replacement to the same length (a permutation when sizes are equal)."""
    _check_count(n_source, "source")
    _check_count(n_target, "target")
    length = max(n_source, n_target)

    def order(n):
        return rng.permutation(n) if n == length else rng.integers(0, n, size=length)

    src, tgt = order(n_source), order(n_target)
    steps = max(1, length // batch_size)
    size = min(batch_size, length)
    return [(src[k * size:(k + 1) * size], tgt[k * size:(k + 1) * size]) for k in range(steps)]


def make_paired_batches(source, target, batch_size, seed, epochs=1):
    """Generator of paired index batches over ``epochs`` epochs."""
    rng = np.random.default_rng(seed)
    ns = source if isinstance(source, int) else len(source)
    nt = target if isinstance(target, int) else len(target)
    for _ in range(epochs):
        yield from paired_batches(ns, nt, batch_size, rng)


def _split(n, fraction, rng):
    perm = rng.permutation(n)
    n_val = int(n * fraction) if n * fraction >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _road(config, ds, index):
    if config.road_feature_mode == "off":
        return None
    d = ds.road_dist_m[index]
    if np.isnan(d).any():
        raise DataError(f"road_feature_mode={config.road_feature_mode} needs road distances for every sample")
    return d


def _inputs(bundle, ds, index, road):
    return bundle.prepare_input(to_chw(ds.pixels()[index]), road)


def augment_batch(x, rng):
    """Random dihedral transform (flips and quarter turns) per sample, [B, C, H, W]."""
    out = np.empty_like(x)
    ops = rng.integers(0, 8, size=len(x))
    for k, op in enumerate(ops):
        a = np.rot90(x[k], int(op % 4), axes=(1, 2))
        out[k] = a[:, :, ::-1] if op >= 4 else a
    return out


def train(config, source_ds, target_ds, out_path=None, bundle=None, on_epoch=None):
    """Train G/D (and C in dann mode). -> (ModelBundle, TrainHistory).

    Target labels are never read. When ``out_path`` is given the checkpoint,
    a history CSV and a JSON summary are written next to it. Deterministic
    mode pins BLAS to one thread so reductions run in a fixed order."""
    config.validate()
    if config.deterministic:
        with threadpool_limits(limits=1):
            return _train(config, source_ds, target_ds, out_path, bundle, on_epoch)
    return _train(config, source_ds, target_ds, out_path, bundle, on_epoch)


def _train(config, source_ds, target_ds, out_path, bundle, on_epoch):
    _check_count(len(source_ds), "source")
    _check_count(len(target_ds), "target")
    if not source_ds.labeled.all():
        raise DataError("every source sample needs a label")
    streams = np.random.SeedSequence(config.seed).spawn(3)
    split_rng, batch_rng, aug_rng = (np.random.default_rng(s) for s in streams)
    s_train, s_val = _split(len(source_ds), config.val_fraction, split_rng)
    t_train, t_val = _split(len(target_ds), config.val_fraction, split_rng)
    s_road_all = _road(config, source_ds, np.arange(len(source_ds)))
    t_road_all = _road(config, target_ds, np.arange(len(target_ds)))

    if bundle is None:
        bundle = ModelBundle.create(config.model_config(), seed=config.seed, with_critic=config.mode == "dann")
    y_all = source_ds.labels.astype(np.float64)
    y_train = y_all[s_train]
    shift = float(y_train.mean())
    scale = float(y_train.std()) or 1.0
    bundle.decoder.out_shift[:] = shift
    bundle.decoder.out_scale[:] = scale
    if bundle.decoder.use_road:
        r = bundle.road_input(s_road_all[s_train])
        bundle.decoder.road_shift[:] = r.mean()
        bundle.decoder.road_scale[:] = r.std() or 1.0

    named = [(n, p) for n, p in bundle.named_parameters()
             if not n.startswith("critic.") or (config.mode == "dann" and config.critic_updates)]
    opt = Adam(named, lr=config.lr, weight_decay=bundle.config.weight_decay,
               decay=bundle.encoder_parameter_names())

    epoch_batches = len(paired_batches(len(s_train), len(t_train), config.batch_size, np.random.default_rng(0)))
    total_steps = config.epochs * epoch_batches
    history = TrainHistory(val_ids=[source_ds.ids[k] for k in s_val])
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        bundle.train()
        reg_sum = dom_sum = 0.0
        batches = paired_batches(len(s_train), len(t_train), config.batch_size, batch_rng)
        for sb, tb in batches:
            si, ti = s_train[sb], t_train[tb]
            lam = lambda_at(config, step / total_steps)
            opt.lr = lr_at(config, step / total_steps)
            try:
                reg, dom = _step(bundle, opt, config, source_ds, target_ds, si, ti,
                                 None if s_road_all is None else s_road_all[si],
                                 None if t_road_all is None else t_road_all[ti],
                                 (y_all[si] - shift) / scale, lam, aug_rng if config.augment else None)
            except NumericFault as exc:
                raise NumericFault(f"{exc} at step {step} (epoch {epoch}, lambda={lam:.4g}, lr={opt.lr:g})") from None
            reg_sum += reg
            dom_sum += dom
            step += 1
        n_b = len(batches)
        val_nrmse, val_r2 = _val_metrics(bundle, source_ds, s_val, s_road_all)
        acc = _critic_accuracy(bundle, source_ds, target_ds, s_val, t_val, s_road_all, t_road_all)
        history.append(EpochRecord(epoch, reg_sum / n_b, dom_sum / n_b if config.mode == "dann" else float("nan"),
                                   acc, val_nrmse, val_r2, time.perf_counter() - t0))
        log.info("epoch %d reg=%.4f dom=%.4f acc=%.3f val_nrmse=%.4f val_r2=%.4f (%.1fs)",
                 epoch, *[getattr(history.records[-1], k) for k in
                          ("reg_loss", "dom_loss", "critic_acc", "val_sigma_nrmse", "val_r2", "seconds")])
        if on_epoch is not None:
            on_epoch(epoch, bundle)
            bundle.train()
        if out_path and config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            checkpoint.save(bundle, _epoch_path(out_path, epoch), {"train": config.to_dict()})
    bundle.eval()
    if out_path:
        checkpoint.save(bundle, out_path, {"train": config.to_dict()})
        history.write_csv(sidecar(out_path, ".history.csv"))
        Path(sidecar(out_path, ".summary.json")).write_text(
            json.dumps(history.summary(config), indent=2, sort_keys=True, default=_json_default) + "\n")
    return bundle, history


def _json_default(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    raise TypeError(type(v))


def sidecar(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _epoch_path(path, epoch):
    p = Path(path)
    return p.with_name(f"{p.stem}.e{epoch:03d}{p.suffix}")


def dann_losses(bundle, x, y_std, n_source, lam, road_source=None, adversarial=True):
    """Losses for one mixed batch: the first ``n_source`` rows of ``x`` are source.

    -> (regression, domain or None, total). The domain term is added as is;
    its weight on the encoder comes from the reversal coefficient ``lam``."""
    emb = bundle.encode(x if isinstance(x, T.Tensor) else T.Tensor(x))
    z = bundle.decoder.standardized(emb[:n_source], bundle.road_input(road_source))
    reg = euclidean_loss(z, y_std)
    if not adversarial:
        return reg, None, reg
    logits = bundle.critic_logit(emb, lam)
    labels = np.concatenate([np.zeros(n_source), np.ones(emb.shape[0] - n_source)])
    dom = domain_bce(logits, labels)
    return reg, dom, reg + dom


def _step(bundle, opt, config, source_ds, target_ds, si, ti, s_road, t_road, y_std, lam, aug_rng):
    x = np.concatenate([_inputs(bundle, source_ds, si, s_road).data, _inputs(bundle, target_ds, ti, t_road).data])
    if aug_rng is not None:
        x = augment_batch(x, aug_rng)
    reg, dom, total = dann_losses(bundle, x, y_std, len(si), lam, s_road, adversarial=config.mode == "dann")
    opt.zero_grad()
    bundle.zero_grad()
    T.backward(total)
    opt.step()
    return reg.item(), float("nan") if dom is None else dom.item()


def _val_metrics(bundle, ds, index, road):
    if len(index) < 2:
        return float("nan"), float("nan")
    y = ds.labels[index]
    if np.ptp(y) == 0:
        return float("nan"), float("nan")
    pred = bundle.predict(to_chw(ds.pixels()[index]), None if road is None else road[index])
    return sigma_nrmse(pred, y), r2(pred, y, "det")


def _critic_accuracy(bundle, source_ds, target_ds, s_idx, t_idx, s_road, t_road):
    if bundle.critic is None or len(s_idx) == 0 or len(t_idx) == 0:
        return float("nan")
    bundle.eval()
    with T.no_grad():
        correct = 0
        for ds, idx, road, label in ((source_ds, s_idx, s_road, 0), (target_ds, t_idx, t_road, 1)):
            x = _inputs(bundle, ds, idx, None if road is None else road[idx])
            logits = bundle.critic(bundle.encode(x)).data
            correct += int(((logits > 0).astype(int) == label).sum())
    bundle.train()
    return correct / (len(s_idx) + len(t_idx))


def infer_map(model, tile, roads=None, batch_size=256):
    """NO2 grid [H // 80, W // 80] for a tile, one value per patch cell.

    ``model`` is a ModelBundle or a checkpoint path; ``roads`` is required
    whenever the model consumes road distances."""
    if not isinstance(model, ModelBundle):
        model, _ = checkpoint.load(model)
    if tile.pixels.shape[0] < PATCH or tile.pixels.shape[1] < PATCH:
        raise DataError(f"tile {tile.id} is smaller than {PATCH}x{PATCH}")
    patches = extract_patches(tile)
    rows, cols = tile.pixels.shape[0] // PATCH, tile.pixels.shape[1] // PATCH
    road = None
    if model.config.road_feature_mode != "off":
        if roads is None:
            raise DataError(f"model uses road_feature_mode={model.config.road_feature_mode}; a road network is required")
        road = road_distance_many([p.center for p in patches], roads)
    x = to_chw(np.stack([p.pixels for p in patches]))
    return model.predict(x, road, batch_size=batch_size).reshape(rows, cols)


def predict_dataset(model, dataset, batch_size=256):
    """Predictions for every sample of a dataset, in dataset order."""
    if not isinstance(model, ModelBundle):
        model, _ = checkpoint.load(model)
    road = None
    if model.config.road_feature_mode != "off":
        road = dataset.road_dist_m
        if np.isnan(road).any():
            raise DataError("model needs road distances; attach a road network to the dataset")
    return model.predict(to_chw(dataset.pixels()), road, batch_size=batch_size)


def evaluate(model, dataset, batch_size=256):
    """-> (MetricsReport, predictions) against the dataset's labels."""
    if not dataset.labeled.all():
        missing = [dataset.ids[k] for k in np.flatnonzero(~dataset.labeled)[:5]]
        raise DataError(f"evaluation needs labels for every sample; missing for e.g. {missing}")
    pred = predict_dataset(model, dataset, batch_size)
    return report(pred, dataset.labels), pred

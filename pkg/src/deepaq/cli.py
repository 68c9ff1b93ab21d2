"""deepaq command line: synth, train, eval, predict, explain.

Exit codes: 0 ok, 2 usage/config, 3 data, 4 numeric fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DeepAQError
from .geodata import GeoRef, load_manifest, load_roads, read_tile, to_chw, write_png
from .model import ModelConfig
from .train import TrainConfig

log = logging.getLogger("deepaq")

HEAT_RANGE = (0.0, 100.0)
_TRAIN = TrainConfig()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _lambda_arg(text):
    if text == "ganin":
        return ("ganin", _TRAIN.lambda_value)
    for prefix, schedule in (("ganin:", "ganin"), ("const:", "constant")):
        if text.startswith(prefix):
            try:
                return (schedule, float(text[len(prefix):]))
            except ValueError:
                pass
    raise argparse.ArgumentTypeError(f"expected 'ganin', 'ganin:<peak>' or 'const:<value>', got {text!r}")


def build_parser():
    p = _Parser(prog="deepaq", description="Domain-adversarial NO2 estimation from image patches")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic source/target benchmark")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--shift", choices=("palette", "none"), default="palette")
    s.add_argument("--tiles", type=int, default=20)
    s.add_argument("--tile-px", type=int, default=800)

    t = sub.add_parser("train", help="train a dann or baseline model")
    t.add_argument("--mode", choices=("dann", "baseline"), default="dann")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=_TRAIN.epochs)
    t.add_argument("--batch", type=int, default=_TRAIN.batch_size)
    t.add_argument("--lr", type=float, default=_TRAIN.lr)
    t.add_argument("--lr-schedule", choices=("anneal", "constant"), default=_TRAIN.lr_schedule)
    t.add_argument("--lambda", dest="lam", type=_lambda_arg, default=("ganin", _TRAIN.lambda_value))
    t.add_argument("--no-roads", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--source-roads", help="road JSON used to fill missing source road distances")
    t.add_argument("--target-roads", help="road JSON used to fill missing target road distances")

    e = sub.add_parser("eval", help="score a model against sealed labels")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--roads")

    pr = sub.add_parser("predict", help="NO2 grid for a raster tile")
    pr.add_argument("--model", required=True)
    pr.add_argument("--tile", required=True)
    pr.add_argument("--geo", required=True, help="JSON with x0_m, y0_m, res_m_per_px")
    pr.add_argument("--out", required=True)
    pr.add_argument("--png")
    pr.add_argument("--roads")

    x = sub.add_parser("explain", help="Grad-CAM saliency for one patch")
    x.add_argument("--model", required=True)
    x.add_argument("--patch", required=True, help="sample id")
    x.add_argument("--data", required=True, help="manifest containing the patch")
    x.add_argument("--out", required=True)
    x.add_argument("--layer")
    x.add_argument("--roads")
    return p


def _echo(out_dir, args):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _writable_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return Path(path)


def cmd_synth(args):
    from .synthcity import make_benchmark
    out = _writable_dir(args.out)
    try:
        paths = make_benchmark(args.seed, out, tiles=args.tiles, shift=args.shift, tile_px=args.tile_px)
    except OSError as exc:
        raise ConfigError(f"cannot write benchmark under {out}: {exc}") from None
    _echo(out, args)
    print(f"wrote {paths.source_manifest} and {paths.target_manifest}")


def _dataset(manifest, roads=None):
    ds = load_manifest(manifest)
    if roads:
        ds.attach_roads(load_roads(roads))
    return ds


def cmd_train(args):
    from .train import train
    out = Path(args.out)
    _writable_dir(out.parent)
    source = _dataset(args.source, args.source_roads)
    target = _dataset(args.target, args.target_roads)
    if target.labeled.any():
        log.warning("target manifest %s carries %d labels; they are ignored during training",
                    args.target, int(target.labeled.sum()))
        target.strip_labels()
    schedule, lam = args.lam
    config = TrainConfig(mode=args.mode, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                         lr_schedule=args.lr_schedule,
                         lambda_schedule=schedule, lambda_value=lam, seed=args.seed,
                         deterministic=args.deterministic,
                         road_feature_mode="off" if args.no_roads else ModelConfig().road_feature_mode,
                         checkpoint_every=args.checkpoint_every)
    _, history = train(config, source, target, out_path=out)
    _echo(out.parent, args)
    last = history.records[-1]
    print(f"trained {config.epochs} epochs; final reg_loss={last.reg_loss:.4f} "
          f"val_sigma_nrmse={last.val_sigma_nrmse:.4f}; checkpoint {out}")


def cmd_eval(args):
    from . import checkpoint
    from .metrics import write_residuals_csv
    from .synthcity import read_labels_csv
    from .train import evaluate
    out = Path(args.out)
    _writable_dir(out.parent)
    if not Path(args.labels).exists():
        raise ConfigError(f"sealed labels file {args.labels} not found")
    bundle, _ = checkpoint.load(args.model)
    ds = _dataset(args.data, args.roads).attach_labels(read_labels_csv(args.labels))
    rep, pred = evaluate(bundle, ds)
    out.write_text(rep.to_json())
    write_residuals_csv(ds.ids, pred, ds.labels, out.with_name(out.stem + ".residuals.csv"))
    _echo(out.parent, args)
    print(rep.to_json(), end="")


def heat_png(grid, lo=HEAT_RANGE[0], hi=HEAT_RANGE[1]):
    """Fixed-range colormap image of a prediction grid, one pixel per cell."""
    from .explain import colormap
    v = (np.asarray(grid, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(colormap(v)), 0, 255).astype(np.uint8)


def _read_geo(path):
    try:
        d = json.loads(Path(path).read_text())
        return GeoRef(float(d["x0_m"]), float(d["y0_m"]), float(d["res_m_per_px"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad geo JSON {path}: {exc}") from None


def cmd_predict(args):
    from . import checkpoint
    from .train import infer_map
    out = Path(args.out)
    _writable_dir(out.parent)
    bundle, _ = checkpoint.load(args.model)
    tile = read_tile(args.tile, _read_geo(args.geo))
    grid = infer_map(bundle, tile, load_roads(args.roads) if args.roads else None)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid:
            w.writerow([f"{v:.6f}" for v in row])
    if args.png:
        write_png(heat_png(grid), args.png)
    _echo(out.parent, args)
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} grid to {out}")


def cmd_explain(args):
    from . import checkpoint
    from .explain import grad_cam, render_saliency
    out = _writable_dir(args.out)
    bundle, _ = checkpoint.load(args.model)
    ds = _dataset(args.data, args.roads)
    if args.patch not in ds.ids:
        raise DataError(f"patch {args.patch!r} not found in {args.data}")
    k = ds.ids.index(args.patch)
    px = ds.pixels()[k]
    road = None
    if bundle.config.road_feature_mode != "off":
        road = float(ds.road_dist_m[k])
        if np.isnan(road):
            raise DataError(f"patch {args.patch!r} has no road distance; pass --roads")
    sal = grad_cam(bundle, to_chw(px), layer=args.layer, road_dist_m=road, patch_id=args.patch)
    stem = args.patch.replace("/", "_")
    write_png(render_saliency(sal, px), out / f"{stem}.saliency.png")
    sal.write_csv(out / f"{stem}.saliency.csv")
    _echo(out, args)
    print(f"saliency for {args.patch} (layer {sal.layer}, peak {sal.values.max():.4g}) in {out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "explain": cmd_explain}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except DeepAQError as exc:
        print(f"deepaq {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

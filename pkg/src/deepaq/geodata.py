"""Tiles, patches, road networks and JSON Lines dataset manifests."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

PATCH = 80
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class GeoRef:
    x0_m: float
    y0_m: float
    res_m_per_px: float

    def __post_init__(self):
        if not (self.res_m_per_px > 0 and math.isfinite(self.res_m_per_px)):
            raise DataError(f"res_m_per_px must be positive, got {self.res_m_per_px}")

    def to_dict(self):
        return {"x0_m": self.x0_m, "y0_m": self.y0_m, "res_m_per_px": self.res_m_per_px}


@dataclass
class Tile:
    pixels: np.ndarray  # H x W x 3 uint8
    geo: GeoRef
    id: str = "tile"

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"tile {self.id}: expected H x W x 3 uint8 pixels, got {px.dtype} {list(px.shape)}")
        if px.shape[0] < PATCH or px.shape[1] < PATCH:
            raise DataError(f"tile {self.id}: {px.shape[0]}x{px.shape[1]} is smaller than {PATCH}x{PATCH}")


@dataclass
class Patch:
    row: int
    col: int
    pixels: np.ndarray  # 80 x 80 x 3 uint8
    center: tuple


def patch_grid_shape(height, width):
    return height // PATCH, width // PATCH


def patch_center(geo, row, col):
    return (geo.x0_m + (PATCH * col + PATCH / 2) * geo.res_m_per_px,
            geo.y0_m + (PATCH * row + PATCH / 2) * geo.res_m_per_px)


def extract_patches(tile):
    """Non-overlapping 80x80 patches on a stride-80 grid, row-major; border remainders are dropped."""
    if tile.pixels.shape[0] < PATCH or tile.pixels.shape[1] < PATCH:
        raise DataError(f"tile {tile.id} is smaller than {PATCH}x{PATCH}")
    rows, cols = patch_grid_shape(*tile.pixels.shape[:2])
    return [Patch(i, j, tile.pixels[i * PATCH:(i + 1) * PATCH, j * PATCH:(j + 1) * PATCH],
                  patch_center(tile.geo, i, j))
            for i in range(rows) for j in range(cols)]


def normalize(pixels):
    """uint8 -> float32 in [-1, 1] via x / 127.5 - 1."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize(values):
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_chw(pixels_hwc):
    """[..., H, W, 3] uint8 -> normalized [..., 3, H, W] float32."""
    return np.moveaxis(normalize(pixels_hwc), -1, -3)


def identity_preprocess(pixels):
    """Hook for radiometric correction / cloud filtering of real imagery (no-op)."""
    return pixels


# --- roads -----------------------------------------------------------------


@dataclass
class RoadNetwork:
    polylines: list = field(default_factory=list)  # list of (points [n, 2] float64, cls)

    def __post_init__(self):
        checked = []
        for pts, cls in self.polylines:
            pts = np.asarray(pts, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
                raise DataError(f"polyline needs >= 2 (x, y) vertices, got shape {list(pts.shape)}")
            if not np.isfinite(pts).all():
                raise DataError("polyline coordinates must be finite")
            if cls not in ("major", "minor"):
                raise DataError(f"road class must be 'major' or 'minor', got {cls!r}")
            checked.append((pts, cls))
        self.polylines = checked

    def segments(self, cls="major"):
        """All segments of the given class as an [n, 2, 2] array."""
        segs = [np.stack([pts[:-1], pts[1:]], axis=1) for pts, c in self.polylines if cls is None or c == cls]
        return np.concatenate(segs) if segs else np.zeros((0, 2, 2))

    def merged(self, other):
        return RoadNetwork(self.polylines + other.polylines)

    def to_dict(self):
        return {"polylines": [{"class": cls, "points": pts.tolist()} for pts, cls in self.polylines]}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls([(p["points"], p["class"]) for p in d["polylines"]])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed road network: {exc}") from None


def save_roads(network, path):
    Path(path).write_text(json.dumps(network.to_dict(), separators=(",", ":")) + "\n")


def load_roads(path):
    try:
        return RoadNetwork.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read road network {path}: {exc}") from None


def segment_distances(points, segments):
    """Exact Euclidean distances [n_points, n_segments] from points to segments."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 1, 2)
    a = segments[None, :, 0, :]
    ab = segments[None, :, 1, :] - a
    ap = p - a
    denom = (ab * ab).sum(-1)
    t = np.where(denom > 0, (ap * ab).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = ap - t[..., None] * ab
    return np.sqrt((d * d).sum(-1))


def road_distance_many(points, network, cls="major", chunk=65536):
    segs = network.segments(cls)
    if len(segs) == 0:
        raise DataError(f"road network has no {cls} roads")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.empty(len(pts))
    step = max(1, chunk // max(1, len(segs)))
    for i in range(0, len(pts), step):
        out[i:i + step] = segment_distances(pts[i:i + step], segs).min(axis=1)
    return out


def road_distance(point, network):
    """Distance in meters from ``point`` to the nearest major road segment."""
    return float(road_distance_many([point], network)[0])


# --- manifests -------------------------------------------------------------


@dataclass
class Sample:
    id: str
    patch: np.ndarray  # 3 x 80 x 80 float32 in [-1, 1]
    domain: str
    label: float | None
    road_dist_m: float | None
    center: tuple


@dataclass
class Record:
    id: str
    image: str
    domain: str
    label_no2: float | None
    geo: GeoRef
    road_dist_m: float | None = None

    def to_dict(self):
        d = {"id": self.id, "image": self.image, "domain": self.domain,
             "label_no2": self.label_no2, "geo": self.geo.to_dict()}
        if self.road_dist_m is not None:
            d["road_dist_m"] = self.road_dist_m
        return d


def _parse_record(obj, index, root):
    def bad(msg):
        return DataError(f"manifest record {index}: {msg}")

    if not isinstance(obj, dict):
        raise bad("not a JSON object")
    for key in ("id", "image", "domain", "label_no2", "geo"):
        if key not in obj:
            raise bad(f"missing field {key!r}")
    if obj["domain"] not in DOMAINS:
        raise bad(f"domain must be 'source' or 'target', got {obj['domain']!r}")
    label = obj["label_no2"]
    if label is not None:
        if not isinstance(label, (int, float)) or isinstance(label, bool) or not math.isfinite(label):
            raise bad(f"label_no2 must be a number or null, got {label!r}")
        if label < 0:
            raise bad(f"negative label_no2 {label}")
        label = float(label)
    road = obj.get("road_dist_m")
    if road is not None:
        if not isinstance(road, (int, float)) or road < 0 or not math.isfinite(road):
            raise bad(f"road_dist_m must be a non-negative number, got {road!r}")
        road = float(road)
    try:
        g = obj["geo"]
        geo = GeoRef(float(g["x0_m"]), float(g["y0_m"]), float(g["res_m_per_px"]))
    except (KeyError, TypeError, ValueError, DataError) as exc:
        raise bad(f"bad geo block: {exc}") from None
    if not (root / obj["image"]).is_file():
        raise bad(f"image file not found: {obj['image']}")
    return Record(str(obj["id"]), obj["image"], obj["domain"], label, geo, road)


class PatchDataset:
    """Samples from a manifest. Images are decoded on first access and cached."""

    def __init__(self, records, root, preprocess=identity_preprocess):
        self.records = list(records)
        self.root = Path(root)
        self.preprocess = preprocess
        self._pixels = None
        self._expand()

    def _expand(self):
        # one record may be a larger unlabeled tile that yields several patches
        ids, src, centers = [], [], []
        for ri, rec in enumerate(self.records):
            with Image.open(self.root / rec.image) as im:
                w, h = im.size
            if h < PATCH or w < PATCH:
                raise DataError(f"manifest record {ri}: image {w}x{h} is smaller than {PATCH}x{PATCH}")
            rows, cols = patch_grid_shape(h, w)
            if rows * cols > 1 and (rec.label_no2 is not None or rec.road_dist_m is not None):
                raise DataError(f"manifest record {ri}: labels/road distances need an 80x80 image, got {w}x{h}")
            for i in range(rows):
                for j in range(cols):
                    ids.append(rec.id if rows * cols == 1 else f"{rec.id}/{i}_{j}")
                    src.append((ri, i, j))
                    centers.append(patch_center(rec.geo, i, j))
        self.ids = ids
        self._src = src
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        self.domains = np.array([self.records[ri].domain for ri, _, _ in src])
        self.labels = np.array([np.nan if self.records[ri].label_no2 is None else self.records[ri].label_no2
                                for ri, _, _ in src], dtype=np.float64)
        self.road_dist_m = np.array([np.nan if self.records[ri].road_dist_m is None else self.records[ri].road_dist_m
                                     for ri, _, _ in src], dtype=np.float64)

    def __len__(self):
        return len(self.ids)

    @property
    def labeled(self):
        return ~np.isnan(self.labels)

    def pixels(self):
        """All patches as [N, 80, 80, 3] uint8."""
        if self._pixels is None:
            out = np.empty((len(self), PATCH, PATCH, 3), dtype=np.uint8)
            cache = {}
            for k, (ri, i, j) in enumerate(self._src):
                if ri not in cache:
                    cache = {ri: _read_rgb(self.root / self.records[ri].image)}
                out[k] = self.preprocess(cache[ri][i * PATCH:(i + 1) * PATCH, j * PATCH:(j + 1) * PATCH])
            self._pixels = out
        return self._pixels

    def attach_roads(self, network):
        """Fill missing road distances from a road network."""
        missing = np.isnan(self.road_dist_m)
        if missing.any():
            self.road_dist_m[missing] = road_distance_many(self.centers[missing], network)
        return self

    def attach_labels(self, labels):
        """Set labels from an {id: value} mapping; every sample must be covered."""
        missing = [i for i in self.ids if i not in labels]
        if missing:
            raise DataError(f"{len(missing)} samples have no label, e.g. {missing[:3]}")
        self.labels[:] = [labels[i] for i in self.ids]
        return self

    def strip_labels(self):
        self.labels[:] = np.nan
        return self

    def subset(self, index):
        ds = PatchDataset.__new__(PatchDataset)
        index = np.asarray(index, dtype=np.int64)
        ds.records, ds.root, ds.preprocess = self.records, self.root, self.preprocess
        ds.ids = [self.ids[k] for k in index]
        ds._src = [self._src[k] for k in index]
        ds.centers = self.centers[index]
        ds.domains = self.domains[index]
        ds.labels = self.labels[index].copy()
        ds.road_dist_m = self.road_dist_m[index].copy()
        ds._pixels = None if self._pixels is None else self._pixels[index]
        return ds

    def __iter__(self):
        px = self.pixels()
        for k in range(len(self)):
            label = None if np.isnan(self.labels[k]) else float(self.labels[k])
            road = None if np.isnan(self.road_dist_m[k]) else float(self.road_dist_m[k])
            yield Sample(self.ids[k], to_chw(px[k]), str(self.domains[k]), label, road,
                         tuple(self.centers[k]))


def _read_rgb(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None


def read_tile(path, geo, tile_id=None):
    return Tile(_read_rgb(path), geo, tile_id or Path(path).stem)


def write_png(pixels, path):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, format="PNG", optimize=False, compress_level=6)


def load_manifest(path, preprocess=identity_preprocess):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    records = []
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest record {index}: invalid JSON ({exc.msg})") from None
        records.append(_parse_record(obj, index, path.parent))
    return PatchDataset(records, path.parent, preprocess)


def write_manifest(records, path):
    """Write records (or a PatchDataset's records) as JSON Lines."""
    if isinstance(records, PatchDataset):
        records = records.records
    text = "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)

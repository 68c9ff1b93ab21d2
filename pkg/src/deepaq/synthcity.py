"""Procedural source/target cities with an analytic NO2 field.

A world is a semantic layout (roads, parks, buildings) plus an oracle field
computed from that layout. Rendering the same layout under two palettes gives
a pair of domains that differ in appearance only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .geodata import (PATCH, GeoRef, Record, RoadNetwork, Tile, extract_patches, road_distance_many,
                      save_roads, write_manifest, write_png)

RES_M = 2.5
GROUND, BUILDING, PARK, MINOR, MAJOR = range(5)
MAJOR_HALF_WIDTH_PX = 3.5
MINOR_HALF_WIDTH_PX = 1.5


@dataclass(frozen=True)
class Style:
    ground: tuple
    buildings: tuple
    park: tuple
    minor_road: tuple
    major_road: tuple
    texture_sigma: float
    park_speckle: float


STYLES = {
    "source_style": Style(
        ground=(168, 160, 142),
        buildings=((118, 118, 124), (150, 140, 128), (98, 94, 90), (182, 176, 170)),
        park=(62, 118, 52),
        minor_road=(104, 104, 104),
        major_road=(58, 58, 64),
        texture_sigma=8.0,
        park_speckle=10.0,
    ),
    "target_style": Style(
        ground=(186, 122, 82),
        buildings=((205, 205, 212), (142, 72, 52), (92, 92, 112), (222, 184, 122)),
        park=(112, 138, 58),
        minor_road=(156, 112, 80),
        major_road=(122, 120, 112),
        texture_sigma=16.0,
        park_speckle=22.0,
    ),
}


@dataclass
class SyntheticWorldSpec:
    seed: int = 0
    size_px: int = 800
    road_density: float = 0.5
    park_density: float = 0.5
    palette: str = "source_style"
    noise_sigma: float = 2.0
    a: float = 60.0
    tau_m: float = 300.0
    b: float = 20.0
    x0_m: float = 0.0
    y0_m: float = 0.0

    def validate(self):
        if self.size_px <= 0 or self.size_px % PATCH:
            raise ConfigError(f"size_px must be a positive multiple of {PATCH}, got {self.size_px}")
        for name in ("road_density", "park_density"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.palette not in STYLES:
            raise ConfigError(f"palette must be one of {sorted(STYLES)}, got {self.palette!r}")
        if self.noise_sigma < 0 or self.tau_m <= 0 or self.a < 0 or self.b < 0:
            raise ConfigError("noise_sigma, a, b must be >= 0 and tau_m > 0")
        return self

    @property
    def geo(self):
        return GeoRef(self.x0_m, self.y0_m, RES_M)


@dataclass
class Layout:
    classes: np.ndarray  # H x W int8 semantic map
    building_tone: np.ndarray  # H x W int8 palette index per building pixel
    roads: RoadNetwork
    d_major_m: np.ndarray  # H x W distance from pixel centers to the nearest major road


@dataclass
class OracleField:
    geo: GeoRef
    a: float
    tau_m: float
    b: float
    noise_sigma: float
    d_road_m: np.ndarray = field(repr=False)
    green_frac: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def clean(self, d_road_m, green_frac):
        """The field without noise: max(0, a*exp(-d/tau) - b*green)."""
        return np.maximum(0.0, self.a * np.exp(-np.asarray(d_road_m) / self.tau_m) - self.b * np.asarray(green_frac))


def pixel_centers(geo, height, width):
    xs = geo.x0_m + (np.arange(width) + 0.5) * geo.res_m_per_px
    ys = geo.y0_m + (np.arange(height) + 0.5) * geo.res_m_per_px
    return np.stack(np.meshgrid(xs, ys), axis=-1)  # H x W x 2


def _edge_point(rng, side, extent):
    t = rng.uniform(0.1, 0.9) * extent
    return [(t, 0.0), (extent, t), (t, extent), (0.0, t)][side]


def _make_roads(rng, spec):
    extent = spec.size_px * RES_M
    origin = np.array([spec.x0_m, spec.y0_m])
    polylines = []
    n_major = 1 + rng.binomial(5, spec.road_density)
    for _ in range(n_major):
        s0, s1 = rng.choice(4, size=2, replace=False)
        p0 = np.array(_edge_point(rng, s0, extent))
        p1 = np.array(_edge_point(rng, s1, extent))
        n_mid = rng.integers(1, 3)
        mids = [p0 + (p1 - p0) * (k + 1) / (n_mid + 1) + rng.normal(0, 0.06 * extent, 2) for k in range(n_mid)]
        pts = np.clip(np.array([p0, *mids, p1]), 0.0, extent)
        polylines.append((pts + origin, "major"))
    n_minor = rng.binomial(14, spec.road_density)
    for _ in range(n_minor):
        start = rng.uniform(0.05, 0.95, 2) * extent
        pts = [start]
        for _ in range(rng.integers(1, 3)):
            angle = rng.choice([0.0, 0.5 * np.pi]) + rng.normal(0, 0.15)
            length = rng.uniform(100.0, 350.0)
            pts.append(pts[-1] + length * np.array([np.cos(angle), np.sin(angle)]) * rng.choice([-1, 1]))
        polylines.append((np.clip(np.array(pts), 0.0, extent) + origin, "minor"))
    return RoadNetwork(polylines)


def _distance_grid(geo, n, network, cls):
    """Exact distance (m) from every pixel center of an n x n grid to the nearest ``cls`` segment."""
    segs = network.segments(cls)
    if len(segs) == 0:
        return np.full((n, n), np.inf)
    xs = geo.x0_m + (np.arange(n) + 0.5) * geo.res_m_per_px
    ys = geo.y0_m + (np.arange(n) + 0.5) * geo.res_m_per_px
    X, Y = xs[None, :], ys[:, None]
    best = np.full((n, n), np.inf)
    for (ax, ay), (bx, by) in segs:
        abx, aby = bx - ax, by - ay
        L2 = abx * abx + aby * aby
        px, py = X - ax, Y - ay
        t = np.clip((px * abx + py * aby) / L2, 0.0, 1.0) if L2 > 0 else np.zeros((n, n))
        dx, dy = px - t * abx, py - t * aby
        np.minimum(best, dx * dx + dy * dy, out=best)
    return np.sqrt(best)


def _make_layout(spec):
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.size_px
    roads = _make_roads(rng, spec)
    classes = np.zeros((n, n), dtype=np.int8)
    tone = np.zeros((n, n), dtype=np.int8)

    n_buildings = int(rng.poisson(900 * (n / 800) ** 2))
    for _ in range(n_buildings):
        r, c = rng.integers(0, n, 2)
        h, w = rng.integers(6, 22, 2)
        classes[r:r + h, c:c + w] = BUILDING
        tone[r:r + h, c:c + w] = rng.integers(0, 4)

    n_parks = rng.binomial(10, spec.park_density)
    for _ in range(n_parks):
        cy, cx = rng.uniform(0, n, 2)
        for _ in range(rng.integers(2, 5)):
            oy, ox = rng.normal(0, 25, 2)
            ry, rx = rng.uniform(15, 60, 2)
            ey, ex = cy + oy, cx + ox
            r0, r1 = max(0, int(ey - ry)), min(n, int(ey + ry) + 2)
            c0, c1 = max(0, int(ex - rx)), min(n, int(ex + rx) + 2)
            if r0 >= r1 or c0 >= c1:
                continue
            yy = np.arange(r0, r1)[:, None] + 0.5
            xx = np.arange(c0, c1)[None, :] + 0.5
            inside = ((yy - ey) / ry) ** 2 + ((xx - ex) / rx) ** 2 <= 1.0
            classes[r0:r1, c0:c1][inside] = PARK

    d_major = _distance_grid(spec.geo, n, roads, "major")
    classes[_distance_grid(spec.geo, n, roads, "minor") <= MINOR_HALF_WIDTH_PX * RES_M] = MINOR
    classes[d_major <= MAJOR_HALF_WIDTH_PX * RES_M] = MAJOR
    return Layout(classes, tone, roads, d_major)


def render(layout, palette, seed):
    """Paint a semantic layout with a named palette; texture noise is seeded by (seed, palette)."""
    style = STYLES[palette]
    rng = np.random.default_rng([seed, 2, list(STYLES).index(palette)])
    cls = layout.classes
    img = np.empty(cls.shape + (3,), dtype=np.float64)
    img[:] = style.ground
    buildings = np.asarray(style.buildings, dtype=np.float64)
    bmask = cls == BUILDING
    img[bmask] = buildings[layout.building_tone[bmask]]
    img[cls == PARK] = style.park
    img[cls == MINOR] = style.minor_road
    img[cls == MAJOR] = style.major_road
    img += rng.normal(0.0, style.texture_sigma, img.shape)
    speckle = ndimage.uniform_filter(rng.normal(0.0, 1.0, cls.shape), size=3) * 3.0 * style.park_speckle
    img[cls == PARK] += speckle[cls == PARK, None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def oracle_field(spec, layout):
    n = spec.size_px
    d_road = layout.d_major_m
    # 200 m window = 80 px; odd size keeps it centered on the pixel
    green = ndimage.uniform_filter((layout.classes == PARK).astype(np.float64), size=PATCH + 1, mode="reflect")
    green = np.clip(green, 0.0, 1.0)
    rng = np.random.default_rng([spec.seed, 3])
    eta = rng.normal(0.0, spec.noise_sigma, (n, n)) if spec.noise_sigma > 0 else 0.0
    values = np.maximum(0.0, spec.a * np.exp(-d_road / spec.tau_m) - spec.b * green + eta)
    return OracleField(spec.geo, spec.a, spec.tau_m, spec.b, spec.noise_sigma, d_road, green, values)


def generate_world(spec):
    """-> (Tile, RoadNetwork, OracleField) for a validated spec."""
    spec.validate()
    layout = _make_layout(spec)
    tile = Tile(render(layout, spec.palette, spec.seed), spec.geo, f"world{spec.seed}")
    return tile, layout.roads, oracle_field(spec, layout)


def generate_layout(spec):
    spec.validate()
    return _make_layout(spec)


@dataclass
class LabeledPatch:
    row: int
    col: int
    pixels: np.ndarray
    center: tuple
    label: float
    road_dist_m: float | None


def label_patches(tile, field, roads=None):
    """Label each 80x80 patch with the mean of the field over its cell."""
    if field.geo != tile.geo or field.values.shape != tile.pixels.shape[:2]:
        raise DataError(f"tile frame {tile.geo} {list(tile.pixels.shape[:2])} does not match "
                        f"field frame {field.geo} {list(field.values.shape)}")
    patches = extract_patches(tile)
    rows, cols = tile.pixels.shape[0] // PATCH, tile.pixels.shape[1] // PATCH
    v = field.values[:rows * PATCH, :cols * PATCH].reshape(rows, PATCH, cols, PATCH).mean(axis=(1, 3))
    centers = np.array([p.center for p in patches])
    dists = road_distance_many(centers, roads) if roads is not None else [None] * len(patches)
    return [LabeledPatch(p.row, p.col, p.pixels, p.center, float(v[p.row, p.col]),
                         None if d is None else float(d))
            for p, d in zip(patches, dists)]


# --- benchmark -------------------------------------------------------------

TILE_SPACING_M = 20_000.0


@dataclass
class BenchmarkPaths:
    root: Path
    source_manifest: Path
    target_manifest: Path
    sealed_labels: Path
    source_roads: Path
    target_roads: Path


def _world_seed(seed, domain, k):
    return int(np.random.SeedSequence([seed, domain, k]).generate_state(1)[0])


def make_benchmark(seed, out_dir, tiles=20, shift="palette", tile_px=800, **spec_kwargs):
    """Write a labeled source city and an unlabeled target city under ``out_dir``.

    Target labels go only to the sealed CSV; each domain is ``tiles`` worlds of
    ``tile_px`` pixels laid out far apart in one metric frame."""
    if shift not in ("palette", "none"):
        raise ConfigError(f"shift must be 'palette' or 'none', got {shift!r}")
    if tiles < 1:
        raise ConfigError("tiles must be >= 1")
    root = Path(out_dir)
    paths = BenchmarkPaths(root, root / "source.jsonl", root / "target.jsonl", root / "target_labels.csv",
                           root / "roads_source.json", root / "roads_target.json")
    for di, domain in enumerate(("source", "target")):
        (root / domain).mkdir(parents=True, exist_ok=True)
        palette = "target_style" if domain == "target" and shift == "palette" else "source_style"
        records, sealed, network = [], [], RoadNetwork()
        for k in range(tiles):
            spec = SyntheticWorldSpec(seed=_world_seed(seed, di, k), size_px=tile_px, palette=palette,
                                      x0_m=k * TILE_SPACING_M, y0_m=di * TILE_SPACING_M, **spec_kwargs)
            tile, roads, fld = generate_world(spec)
            network = network.merged(roads)
            for item in label_patches(tile, fld, roads):
                pid = f"{domain[0]}{k:03d}_{item.row:02d}_{item.col:02d}"
                rel = f"{domain}/{pid}.png"
                write_png(item.pixels, root / rel)
                gx = spec.x0_m + PATCH * item.col * RES_M
                gy = spec.y0_m + PATCH * item.row * RES_M
                label = round(item.label, 6)
                records.append(Record(pid, rel, domain, label if domain == "source" else None,
                                      GeoRef(gx, gy, RES_M), round(item.road_dist_m, 6)))
                sealed.append((pid, label))
        write_manifest(records, paths.source_manifest if domain == "source" else paths.target_manifest)
        save_roads(network, paths.source_roads if domain == "source" else paths.target_roads)
        if domain == "target":
            write_labels_csv(sealed, paths.sealed_labels)
    return paths


def write_labels_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "no2"])
        for pid, v in rows:
            w.writerow([pid, repr(float(v))])


def read_labels_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc}") from None
    try:
        return {r["id"]: float(r["no2"]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed labels file {path}: {exc}") from None

"""Panorama synthesis, perspective crop rendering and dataset generation.

Equirectangular mapping: longitude ``atan2(x, z)`` runs left to right over
``[-pi, pi)`` and latitude ``asin(y)`` runs top to bottom over
``[pi/2, -pi/2]``. Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)`` in
continuous coordinates, so its center sits at ``(c + 0.5, r + 0.5)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camera_geometry as cg

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STYLES = ("indoor-like", "outdoor-like")

# Every "upper" color is brighter than every "lower" color for both styles, so
# a single luminance threshold separates sky/ceiling from ground/floor.
PALETTES = {
    "indoor-like": {
        "upper": [(232, 196, 178), (210, 172, 152), (246, 222, 205), (196, 160, 150)],
        "lower": [(108, 58, 38), (132, 74, 48), (84, 44, 30), (150, 92, 62)],
        "checker": (15.0, 10.0),
        "shape": "rect",
    },
    "outdoor-like": {
        "upper": [(132, 180, 242), (160, 200, 248), (236, 242, 250), (112, 164, 232)],
        "lower": [(64, 138, 52), (82, 156, 64), (46, 104, 40), (98, 150, 70)],
        "checker": (30.0, 6.0),
        "shape": "disk",
    },
}
LUMA_THRESHOLD = 140.0
_LUMA = np.array([0.299, 0.587, 0.114])
# decorative shapes stay clear of the equator so the horizon edge is exact
_SHAPE_LAT_MARGIN_DEG = 3.0


class ManifestError(ValueError):
    pass


class HorizonNotInFrame(ValueError):
    pass


@dataclass
class Panorama:
    pixels: np.ndarray  # (H, 2H, 3) uint8
    source_id: str
    style: str

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or w != 2 * h:
            raise ValueError(f"panorama must be RGB with width == 2*height, got {self.pixels.shape}")
        if w < 64:
            raise ValueError("panorama width must be >= 64")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CropSpec:
    intrinsics: cg.Intrinsics
    extrinsics: cg.Extrinsics

    @property
    def size(self) -> int:
        return self.intrinsics.width_px

    @classmethod
    def from_degrees(cls, f_px, pitch_deg, roll_deg, yaw_deg=0.0, size=64):
        _check_in("f_px", f_px, *cg.FOCAL_RANGE_PX)
        _check_in("pitch_deg", pitch_deg, *cg.PITCH_RANGE_DEG)
        _check_in("roll_deg", roll_deg, *cg.ROLL_RANGE_DEG)
        return cls(
            cg.Intrinsics(float(f_px), size, size),
            cg.Extrinsics(math.radians(pitch_deg), math.radians(roll_deg), math.radians(yaw_deg % 360.0)),
        )


def _check_in(name, value, lo, hi):
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 0
    focal_range: tuple = cg.FOCAL_RANGE_PX
    pitch_range_deg: tuple = cg.PITCH_RANGE_DEG
    roll_range_deg: tuple = cg.ROLL_RANGE_DEG
    crops_per_panorama: int | None = None
    crop_size: int = 64

    def __post_init__(self):
        for name, (lo, hi), (dlo, dhi) in (
            ("focal_range", self.focal_range, cg.FOCAL_RANGE_PX),
            ("pitch_range_deg", self.pitch_range_deg, cg.PITCH_RANGE_DEG),
            ("roll_range_deg", self.roll_range_deg, cg.ROLL_RANGE_DEG),
        ):
            if not (dlo <= lo < hi <= dhi):
                raise ValueError(f"{name}=({lo}, {hi}) must lie inside ({dlo}, {dhi})")
        if self.crop_size < 2:
            raise ValueError("crop_size must be >= 2")

    def ranges(self) -> dict:
        return {
            "f_px": list(self.focal_range),
            "pitch_deg": list(self.pitch_range_deg),
            "roll_deg": list(self.roll_range_deg),
        }


@dataclass(frozen=True)
class DatasetConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    count: int = 100
    test_count: int = 0
    val_fraction: float = 0.2
    test_panorama_fraction: float = 0.2


@dataclass(frozen=True)
class CropRecord:
    path: str
    panorama_id: str
    f_px: float
    pitch_deg: float
    roll_deg: float
    yaw_deg: float
    focal_n: float
    pitch_n: float
    roll_n: float
    split: str

    def spec(self, size: int) -> CropSpec:
        return CropSpec.from_degrees(self.f_px, self.pitch_deg, self.roll_deg, self.yaw_deg, size)

    @property
    def target(self) -> tuple[float, float, float]:
        return self.focal_n, self.pitch_n, self.roll_n


@dataclass
class DatasetManifest:
    header: dict
    records: list

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict:
        out = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out


# ---------------------------------------------------------------- panoramas


def _lonlat_grid(h: int):
    w = 2 * h
    lon = ((np.arange(w) + 0.5) / w - 0.5) * 2 * np.pi
    lat = (0.5 - (np.arange(h) + 0.5) / h) * np.pi
    return np.meshgrid(np.degrees(lon), np.degrees(lat))


def synth_panorama(seed: int, style: str, height: int = 512) -> Panorama:
    """Procedural equirectangular scene with an exact horizon at latitude 0.

    Each hemisphere is a lon-lat checkerboard in two family colors with seeded
    rectangles (indoor) or disks (outdoor) painted in the family accents.
    """
    if style not in PALETTES:
        raise ValueError(f"style must be one of {STYLES}, got {style!r}")
    pal = PALETTES[style]
    rng = np.random.default_rng([seed, STYLES.index(style)])
    lon, lat = _lonlat_grid(height)
    upper = lat > 0
    lon_step, lat_step = pal["checker"]
    phase = rng.uniform(0, lon_step)
    parity = (np.floor((lon + 180.0 + phase) / lon_step) + np.floor(np.abs(lat) / lat_step)) % 2
    color_idx = parity.astype(np.int64)

    n_shapes = int(rng.integers(12, 20))
    for hemi_sign in (1.0, -1.0):
        for _ in range(n_shapes):
            c_lon = rng.uniform(-180.0, 180.0)
            size_lat = rng.uniform(4.0, 14.0)
            size_lon = rng.uniform(6.0, 24.0)
            lo_lat = _SHAPE_LAT_MARGIN_DEG + size_lat
            c_lat = hemi_sign * rng.uniform(lo_lat, 80.0)
            accent = int(rng.integers(2, 4))
            rows = np.flatnonzero(np.abs(lat[:, 0] - c_lat) <= size_lat)
            dlon = (lon[rows] - c_lon + 180.0) % 360.0 - 180.0
            dlat = lat[rows] - c_lat
            if pal["shape"] == "rect":
                mask = np.abs(dlon) <= size_lon
            else:
                mask = (dlon / size_lon) ** 2 + (dlat / size_lat) ** 2 <= 1.0
            band = color_idx[rows]
            band[mask] = accent
            color_idx[rows] = band

    up_cols = np.array(pal["upper"], dtype=np.uint8)
    lo_cols = np.array(pal["lower"], dtype=np.uint8)
    pixels = np.where(upper[..., None], up_cols[color_idx], lo_cols[color_idx])
    return Panorama(np.ascontiguousarray(pixels), f"{style}-{seed:04d}", style)


def load_panorama(path, source_id=None) -> Panorama:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable panorama {path}: {exc}") from exc
    h, w = pixels.shape[:2]
    if w != 2 * h:
        raise ValueError(f"panorama {path} is {w}x{h}; equirectangular input must have width == 2*height")
    return Panorama(pixels, source_id or Path(path).stem, "external")


def save_png(pixels: np.ndarray, path):
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------- rendering


def pixel_direction(spec: CropSpec, u, v) -> np.ndarray:
    """World-frame unit ray through continuous pixel coordinates ``(u, v)``.

    Works elementwise on arrays; the result has a trailing axis of size 3.
    """
    intr = spec.intrinsics
    cx, cy = intr.center
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    ray = np.stack([(u - cx) / intr.f_px, -(v - cy) / intr.f_px, np.ones_like(u)], axis=-1)
    ray /= np.linalg.norm(ray, axis=-1, keepdims=True)
    return ray @ cg.rotation_matrix(spec.extrinsics)  # row-vector form of R^T @ ray


def _pano_coords(pano_h: int, dirs: np.ndarray):
    w = 2 * pano_h
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    lon = np.arctan2(x, z)
    lat = np.arcsin(np.clip(y / np.linalg.norm(dirs, axis=-1), -1.0, 1.0))
    return (lon / (2 * np.pi) + 0.5) * w, (0.5 - lat / np.pi) * pano_h


def equirect_lookup(pano: Panorama, dirs) -> np.ndarray:
    """Bilinear panorama sample along ``dirs`` (..., 3); returns float RGB.

    Wraps horizontally and clamps vertically.
    """
    dirs = np.asarray(dirs, dtype=float)
    h, w = pano.height, pano.width
    pu, pv = _pano_coords(h, dirs)
    # shift to pixel-center coordinates
    fx, fy = pu - 0.5, pv - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = x0 % w, (x0 + 1) % w
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    img = pano.pixels.astype(np.float64)
    top = img[ya, xa] * (1 - ax) + img[ya, xb] * ax
    bot = img[yb, xa] * (1 - ax) + img[yb, xb] * ax
    return top * (1 - ay) + bot * ay


def render_crop(pano: Panorama, spec: CropSpec) -> np.ndarray:
    """Perspective view of ``pano`` as an (S, S, 3) uint8 image."""
    s = spec.size
    jj, ii = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5)
    rgb = equirect_lookup(pano, pixel_direction(spec, jj, ii))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=float) @ _LUMA


def measure_horizon_row(crop: np.ndarray, threshold: float = LUMA_THRESHOLD) -> float:
    """Continuous row of the sky/ground transition in a zero-roll procedural crop.

    Counts pixels of the bright (upper) family per column and averages over
    columns; with pixel ``i`` spanning ``[i, i+1)`` that count is the boundary
    coordinate.
    """
    upper = luminance(crop) > threshold
    counts = upper.sum(axis=0)
    h = crop.shape[0]
    if np.all(counts == 0) or np.all(counts == h):
        raise HorizonNotInFrame("horizon not in frame")
    return float(counts.mean())


# ---------------------------------------------------------------- sampling


def sample_params(rng: np.random.Generator, cfg: SamplerConfig) -> CropSpec:
    """Draw one crop; values are rounded to the manifest's 6 decimals so the
    stored record reproduces the rendered view exactly."""
    f_lo, f_hi = cfg.focal_range
    p_lo, p_hi = cfg.pitch_range_deg
    r_lo, r_hi = cfg.roll_range_deg
    u = rng.random(4)
    f_px = round(f_lo + (f_hi - f_lo) * u[0], 6)
    # open at the bottom of the pitch range, closed at the top
    pitch = round(p_hi - (p_hi - p_lo) * u[1], 6)
    if pitch <= p_lo:
        pitch = p_lo + 1e-6
    roll = round(r_lo + (r_hi - r_lo) * u[2], 6)
    yaw = round(360.0 * u[3], 6) % 360.0
    return CropSpec.from_degrees(f_px, pitch, roll, yaw, cfg.crop_size)


def spec_degrees(spec: CropSpec) -> tuple[float, float, float, float]:
    e = spec.extrinsics
    return (
        spec.intrinsics.f_px,
        round(math.degrees(e.pitch_rad), 6),
        round(math.degrees(e.roll_rad), 6),
        round(math.degrees(e.yaw_rad), 6) % 360.0,
    )


# ---------------------------------------------------------------- datasets


def _make_record(path, pano_id, f_px, pitch_deg, roll_deg, yaw_deg, split) -> CropRecord:
    t = cg.normalize_values(f_px, pitch_deg, roll_deg)
    return CropRecord(path, pano_id, f_px, pitch_deg, roll_deg, yaw_deg, t.focal_n, t.pitch_n, t.roll_n, split)


def plan_crops(panos, cfg: DatasetConfig) -> list:
    """Seeded crop plan: ``(index, panorama, spec, split)`` per crop."""
    panos = list(panos)
    if cfg.count <= 0 and cfg.test_count <= 0:
        raise ValueError("empty dataset request")
    if not panos:
        raise ValueError("empty panorama set")
    if cfg.count < 0 or cfg.test_count < 0:
        raise ValueError("counts must be non-negative")
    root = np.random.SeedSequence(cfg.sampler.seed)
    param_ss, split_ss, pano_ss = root.spawn(3)
    order = np.random.default_rng(pano_ss).permutation(len(panos))
    if cfg.test_count > 0:
        if len(panos) < 2:
            raise ValueError("a test split needs at least two panoramas (test panoramas are held out)")
        n_test = min(len(panos) - 1, max(1, round(cfg.test_panorama_fraction * len(panos))))
        test_panos = [panos[i] for i in sorted(order[len(panos) - n_test:])]
        pool_panos = [panos[i] for i in sorted(order[: len(panos) - n_test])]
    else:
        test_panos, pool_panos = [], panos

    n_val = int(round(cfg.val_fraction * cfg.count))
    val_idx = set(np.random.default_rng(split_ss).permutation(cfg.count)[:n_val].tolist())

    rng = np.random.default_rng(param_ss)
    jobs = []
    for i in range(cfg.count + cfg.test_count):
        spec = sample_params(rng, cfg.sampler)
        if i < cfg.count:
            pano = pool_panos[_pano_slot(i, len(pool_panos), cfg.sampler.crops_per_panorama)]
            split = "val" if i in val_idx else "train"
        else:
            j = i - cfg.count
            pano = test_panos[_pano_slot(j, len(test_panos), cfg.sampler.crops_per_panorama)]
            split = "test"
        jobs.append((i, pano, spec, split))
    return jobs


def render_splits(panos, cfg: DatasetConfig, workers: int = 1) -> dict:
    """Render a planned dataset straight to network-ready arrays, keyed by split.

    Same crops and splits as ``generate_dataset`` with the same config; PNG
    is lossless, so the arrays equal what ``load_split`` would read back.
    """
    jobs = plan_crops(panos, cfg)

    def work(job):
        return render_crop(job[1], job[2])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            pixels = list(ex.map(work, jobs))
    else:
        pixels = [work(j) for j in jobs]
    out = {}
    for split in ("train", "val", "test"):
        idx = [k for k, j in enumerate(jobs) if j[3] == split]
        if not idx:
            continue
        targets = []
        for k in idx:
            t = cg.normalize_values(*spec_degrees(jobs[k][2])[:3])
            targets.append((t.focal_n, t.pitch_n, t.roll_n))
        out[split] = ArrayDataset(to_network_input(np.stack([pixels[k] for k in idx])),
                                  np.array(targets, dtype=np.float32), split)
    return out


def generate_dataset(panos, cfg: DatasetConfig, out_dir, workers: int = 1) -> DatasetManifest:
    """Render crops from ``panos`` into ``out_dir`` and write ``manifest.jsonl``.

    Train/val crops come from one panorama subset and test crops from a
    disjoint held-out subset. Every byte written is a function of the seed.
    """
    panos = list(panos)
    if cfg.count <= 0 and cfg.test_count <= 0:
        raise ValueError("empty dataset request")
    if not panos:
        raise ValueError("empty panorama set")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")

    jobs = plan_crops(panos, cfg)

    def work(job):
        i, pano, spec, split = job
        rel = f"images/{i:06d}.png"
        save_png(render_crop(pano, spec), out_dir / rel)
        return _make_record(rel, pano.source_id, *spec_degrees(spec), split)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(work, jobs))
    else:
        records = [work(j) for j in jobs]

    header = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.sampler.seed,
        "ranges": cfg.sampler.ranges(),
        "crop_size": cfg.sampler.crop_size,
    }
    manifest = DatasetManifest(header, records)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    log.info("wrote %d crops to %s (%s)", len(records), out_dir, manifest.counts())
    return manifest


def _pano_slot(i, n_panos, per_pano):
    if per_pano:
        return (i // per_pano) % n_panos
    return i % n_panos


def _record_json(r: CropRecord) -> dict:
    return {
        "path": r.path,
        "panorama_id": r.panorama_id,
        "f_px": round(r.f_px, 6),
        "pitch_deg": round(r.pitch_deg, 6),
        "roll_deg": round(r.roll_deg, 6),
        "yaw_deg": round(r.yaw_deg, 6),
        "focal_n": r.focal_n,
        "pitch_n": r.pitch_n,
        "roll_n": r.roll_n,
        "split": r.split,
    }


def write_manifest(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest.header, sort_keys=True) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(_record_json(r), sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Read a manifest and verify every normalized triplet against its raw values."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ManifestError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema {header.get('schema_version')!r}")
    records = []
    for n, line in enumerate(lines[1:], start=2):
        d = json.loads(line)
        rec = CropRecord(**d)
        expect = cg.normalize_values(rec.f_px, rec.pitch_deg, rec.roll_deg)
        got = (rec.focal_n, rec.pitch_n, rec.roll_n)
        if max(abs(a - b) for a, b in zip(got, (expect.focal_n, expect.pitch_n, expect.roll_n))) > 1e-9:
            raise ManifestError(f"{path}:{n}: normalized target {got} does not match raw parameters")
        records.append(rec)
    return DatasetManifest(header, records)


@dataclass
class ArrayDataset:
    """Network-ready images (N, 3, S, S) float32 with normalized targets (N, 3)."""

    images: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __len__(self):
        return len(self.targets)

    def subset(self, idx, name=None) -> ArrayDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.images[idx], self.targets[idx], name or self.name)


INPUT_SCALE = 4.0


def to_network_input(pixels: np.ndarray) -> np.ndarray:
    """uint8 (..., S, S, 3) -> float32 (..., 3, S, S) in [-2, 2].

    The x4 stretch puts the low-contrast procedural textures at roughly unit
    scale, which plain SGD needs to make progress in a few epochs.
    """
    x = (np.asarray(pixels, dtype=np.float32) / 255.0 - 0.5) * INPUT_SCALE
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def load_split(dataset_dir, split: str, manifest: DatasetManifest | None = None) -> ArrayDataset:
    dataset_dir = Path(dataset_dir)
    manifest = manifest or load_manifest(dataset_dir / "manifest.jsonl")
    recs = manifest.split(split)
    if not recs:
        raise ValueError(f"split {split!r} of {dataset_dir} is empty")
    pixels = np.stack([load_png(dataset_dir / r.path) for r in recs])
    targets = np.array([r.target for r in recs], dtype=np.float32)
    return ArrayDataset(to_network_input(pixels), targets, f"{dataset_dir.name}/{split}")

"""Procedural land-cover scenes and their degraded low-resolution revisit stacks."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datapipe import DatasetManifest, downsample_bilinear, downsample_labels
from .metrics import N_CLASSES
from .raster import write_raster

BUILDINGS, SEALED, WATER, FOREST, GRASS, CROP, SOIL = range(N_CLASSES)
NATURAL = (WATER, FOREST, GRASS, CROP, SOIL)

# mean R, G, B, NIR reflectance per class
PALETTE = np.array(
    [
        [0.55, 0.45, 0.40, 0.45],  # buildings
        [0.35, 0.35, 0.36, 0.33],  # sealed
        [0.06, 0.10, 0.16, 0.03],  # water
        [0.05, 0.12, 0.05, 0.55],  # forest
        [0.12, 0.22, 0.09, 0.45],  # grassland
        [0.18, 0.26, 0.12, 0.38],  # cropland
        [0.42, 0.32, 0.24, 0.34],  # bare soil
    ]
)

DEFAULT_MIX = (0.15, 0.10, 0.10, 0.20, 0.15, 0.15, 0.15)


@dataclass
class SceneSpec:
    seed: int = 0
    hr_size: int = 256
    class_mix: tuple = DEFAULT_MIX
    supersample: int = 2
    blob_sigma: float = 6.0
    jitter: float = 0.04
    texture: float = 0.02

    def __post_init__(self):
        mix = np.asarray(self.class_mix, dtype=np.float64)
        if mix.shape != (N_CLASSES,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_mix must be {N_CLASSES} non-negative reals summing to 1")


@dataclass
class DegradeSpec:
    n_views: int = 8
    scale: int = 4
    shift_max: float = 0.5
    blur_sigma: float = 1.2
    noise_sigma: float = 0.01
    mask_fraction: float = 0.05
    gain_jitter: float = 0.02
    offset_jitter: float = 0.02

    def __post_init__(self):
        if not 0 <= self.shift_max < 1:
            raise ValueError("shift_max must be in [0, 1) LR pixels")
        if min(self.blur_sigma, self.noise_sigma, self.mask_fraction, self.gain_jitter, self.offset_jitter) < 0:
            raise ValueError("sigmas, fractions and jitters must be non-negative")


@dataclass
class Degraded:
    views: np.ndarray  # N x C x h x w
    masks: np.ndarray  # N x h x w, True = valid
    shifts: np.ndarray  # N x 2, (dy, dx) in LR pixels
    gains: np.ndarray = field(default=None)
    offsets: np.ndarray = field(default=None)


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _natural_layout(rng, shape, targets, sigma):
    """Assign natural classes by argmax of smooth fields, offsets tuned to hit ``targets``."""
    classes = [c for c in NATURAL if targets[c] > 0]
    if not classes:
        return np.full(shape, SOIL, np.uint8)
    if len(classes) == 1:
        return np.full(shape, classes[0], np.uint8)
    fields_ = np.stack([_smooth_field(rng, shape, sigma) for _ in classes])
    want = np.array([targets[c] for c in classes])
    want = want / want.sum()
    bias = np.zeros(len(classes))
    for _ in range(60):
        winner = np.argmax(fields_ + bias[:, None, None], axis=0)
        frac = np.bincount(winner.ravel(), minlength=len(classes)) / winner.size
        bias += 1.5 * (want - frac)
    return np.asarray(classes, np.uint8)[winner]


def _draw_buildings(rng, labels, target, lo, hi):
    h, w = labels.shape
    placed = 0
    for _ in range(10000):
        if placed >= target:
            break
        bh, bw = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        block = labels[r : r + bh, c : c + bw]
        placed += int((block != BUILDINGS).sum())
        block[...] = BUILDINGS


def _draw_roads(rng, labels, target, lo, hi):
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    placed = int((labels == SEALED).sum())
    for _ in range(200):
        if placed >= target:
            break
        pts = rng.uniform(0, [h, w], size=(rng.integers(2, 4), 2))
        width = rng.uniform(lo, hi)
        road = np.zeros((h, w), bool)
        for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
            d = np.array([y1 - y0, x1 - x0])
            t = np.clip(((yy - y0) * d[0] + (xx - x0) * d[1]) / max(d @ d, 1e-9), 0, 1)
            dist = np.hypot(yy - (y0 + t * d[0]), xx - (x0 + t * d[1]))
            road |= dist <= width / 2
        road &= labels != BUILDINGS
        placed += int((road & (labels != SEALED)).sum())
        labels[road] = SEALED


def render_labels(spec: SceneSpec, rng):
    """Class raster on the fine (supersampled) grid."""
    n = spec.hr_size * spec.supersample
    k = spec.supersample
    mix = np.asarray(spec.class_mix, dtype=np.float64)
    natural_share = sum(mix[c] for c in NATURAL)
    labels = _natural_layout(rng, (n, n), mix, spec.blob_sigma * k)
    if natural_share == 0:
        labels[:] = SEALED if mix[SEALED] >= mix[BUILDINGS] else BUILDINGS
    if 0 < mix[SEALED] < 1:
        _draw_roads(rng, labels, mix[SEALED] * n * n, 2 * k, 4 * k)
    if 0 < mix[BUILDINGS] < 1:
        _draw_buildings(rng, labels, mix[BUILDINGS] * n * n, 4 * k, 16 * k)
    return labels


def render_image(labels, spec: SceneSpec, rng):
    """Per-instance jittered palette plus fine texture; NIR tracks vegetation."""
    img = np.empty((4,) + labels.shape)
    for c in range(N_CLASSES):
        sel = labels == c
        if not sel.any():
            continue
        comp, n_comp = ndimage.label(sel)
        jit = 1.0 + spec.jitter * rng.uniform(-1, 1, size=(n_comp + 1, 4))
        base = PALETTE[c][None] * jit
        img[:, sel] = base[comp[sel]].T
    tex = np.stack([_smooth_field(rng, labels.shape, 1.0) for _ in range(4)])
    img += spec.texture * tex
    return np.clip(img, 0.0, 1.0)


def gen_scene(spec: SceneSpec):
    """Render an HR image (4 x hr x hr, in [0, 1]) and its label raster.

    The scene is drawn on a ``supersample``-times finer grid and brought to
    the HR grid with the same bilinear downsampling and pure-pixel label
    rule used for real data, so mixed edge pixels carry the ignore code.
    """
    rng = np.random.default_rng(spec.seed)
    fine = render_labels(spec, rng)
    image = render_image(fine, spec, rng)
    n = spec.hr_size
    if spec.supersample > 1:
        image = downsample_bilinear(image, n, n)
        labels = downsample_labels(fine, spec.supersample)
    else:
        labels = fine.astype(np.uint8)
    return image.astype(np.float32), labels


def _shift(img, dy, dx):
    if dy == 0 and dx == 0:
        return img.copy()
    return ndimage.shift(img, (0, dy, dx), order=1, mode="grid-wrap")


def box_downsample(img, s):
    c, h, w = img.shape
    return img.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


def degrade(hr, spec: DegradeSpec, seed: int = 0, shifts=None) -> Degraded:
    """Simulate ``n_views`` low-resolution acquisitions of an HR image.

    Per view: sub-pixel translation, Gaussian blur, box-average
    downsampling, gain/offset jitter, additive noise and random invalid
    pixels. View 0 is the zero-shift anchor. ``shifts`` (N x 2, LR pixels)
    overrides the random draw.
    """
    hr = np.asarray(hr, dtype=np.float64)
    c, h, w = hr.shape
    s = spec.scale
    if h % s or w % s:
        raise ValueError(f"HR dims {h}x{w} not divisible by scale {s}")
    rng = np.random.default_rng(seed)
    n = spec.n_views
    drawn = rng.uniform(-spec.shift_max, spec.shift_max, size=(n, 2))
    drawn[0] = 0.0
    shifts = drawn if shifts is None else np.asarray(shifts, dtype=np.float64).reshape(n, 2)
    gains = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter, size=(n, c))
    offsets = rng.uniform(-spec.offset_jitter, spec.offset_jitter, size=(n, c))
    views, masks = [], []
    npx = (h // s) * (w // s)
    n_bad = int(round(spec.mask_fraction * npx))
    for v in range(n):
        x = _shift(hr, shifts[v, 0] * s, shifts[v, 1] * s)
        if spec.blur_sigma > 0:
            x = ndimage.gaussian_filter(x, (0, spec.blur_sigma, spec.blur_sigma), mode="wrap")
        x = box_downsample(x, s)
        x = x * gains[v][:, None, None] + offsets[v][:, None, None] * x.mean(axis=(1, 2), keepdims=True)
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
        valid = np.ones(npx, bool)
        valid[rng.permutation(npx)[:n_bad]] = False
        views.append(np.clip(x, 0.0, 1.0))
        masks.append(valid.reshape(h // s, w // s))
    views = np.stack(views)
    masks = np.stack(masks)
    # every location must stay observable somewhere
    masks[0] |= ~masks.any(axis=0)
    # invalid pixels read as saturated, like cloud
    views = np.where(masks[:, None], views, 1.0)
    return Degraded(views.astype(np.float32), masks, shifts, gains, offsets)


# --------------------------------------------------------------------------
# dataset emission


@dataclass
class SynthConfig:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 0
    hr_size: int = 64
    seed: int = 0
    scene: dict = field(default_factory=dict)
    degrade: dict = field(default_factory=dict)


def synth_sample(index: int, cfg: SynthConfig):
    """One (views, masks, hr, labels) sample, seeded by ``(cfg.seed, index)``."""
    sseed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
    image, labels = gen_scene(SceneSpec(seed=sseed, hr_size=cfg.hr_size, **cfg.scene))
    deg = degrade(image, DegradeSpec(**cfg.degrade), seed=sseed + 1)
    return deg, image, labels


def synth_dataset(out_dir, cfg: SynthConfig, created: str = "1970-01-01T00:00:00Z"):
    """Write prepared patch files and a manifest, one geo block per sample.

    Views are written with masked pixels already imputed; the raw masks go
    alongside as ``mask.s4xr``.
    """
    from .datapipe import impute_masked

    out_dir = Path(out_dir)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    tiles = []
    for i in range(total):
        deg, image, labels = synth_sample(i, cfg)
        views, _ = impute_masked(deg.views, deg.masks)
        name = f"syn{i:05d}"
        rel = Path("patches") / name
        write_raster(views, out_dir / rel / "lr.s4xr")
        write_raster(deg.masks.astype(np.uint8), out_dir / rel / "mask.s4xr")
        write_raster(image, out_dir / rel / "hr.s4xr")
        write_raster(labels, out_dir / rel / "labels.s4xr")
        split = "train" if i < cfg.n_train else "val" if i < cfg.n_train + cfg.n_val else "test"
        tiles.append({
            "tile_id": name,
            "geo_block": i,
            "split": split,
            "revisits": [{"id": f"v{v}", "shift": [round(float(a), 9) for a in deg.shifts[v]]} for v in range(len(deg.views))],
            "patches": [{"id": name, "origin": [0, 0], "lr": str(rel / "lr.s4xr"), "mask": str(rel / "mask.s4xr"),
                         "hr": str(rel / "hr.s4xr"), "labels": str(rel / "labels.s4xr")}],
        })
    manifest = DatasetManifest(tiles=tiles, seed=cfg.seed, created=created)
    manifest.write(out_dir / "manifest.json")
    return manifest


def synth_raw_tiles(out_dir, n_tiles: int = 10, tile_lr: int = 158, seed: int = 0,
                    n_candidates: int = 10, fine_factor: int = 2, blocks_per_row: int = 5):
    """Write raw tiles (candidate metadata, unnormalised LR revisits, HR, labels)
    in the layout read by :func:`sen4x.datapipe.prepare_dataset`."""
    out_dir = Path(out_dir)
    scale = 4
    ref = dt.date(2022, 6, 1)
    for t in range(n_tiles):
        tseed = int(np.random.SeedSequence([seed, t]).generate_state(1)[0])
        rng = np.random.default_rng(tseed)
        hr_size = tile_lr * scale
        # HR rendered on a grid finer than the target, like the native HR product
        image, fine_labels = gen_scene(SceneSpec(seed=tseed, hr_size=hr_size * fine_factor, supersample=1))
        deg = degrade(
            downsample_bilinear(image, hr_size, hr_size),
            DegradeSpec(n_views=n_candidates, scale=scale),
            seed=tseed + 1,
        )
        tdir = out_dir / f"tile{t:04d}"
        cands = []
        for v in range(n_candidates):
            cid = f"r{v:02d}"
            # raw sensor units: reflectance x 10000 with a few hot pixels
            raw = deg.views[v] * 10000.0
            write_raster(raw.astype(np.float32), tdir / "lr" / f"{cid}.s4xr")
            write_raster(deg.masks[v].astype(np.uint8), tdir / "lr" / f"{cid}_mask.s4xr")
            cands.append({
                "id": cid,
                "acq_date": (ref + dt.timedelta(days=int(rng.integers(-700, 700)))).isoformat(),
                "cloud_fraction": round(float(rng.uniform(0, 0.4)), 6),
                "invalid_fraction": round(float(1 - deg.masks[v].mean()), 6),
                "high_reflectance_fraction": round(float(np.mean(np.any(deg.views[v] > 0.8, axis=0))), 6),
            })
        write_raster((image * 10000.0).astype(np.float32), tdir / "hr.s4xr")
        write_raster(fine_labels, tdir / "labels.s4xr")
        row, col = divmod(t, blocks_per_row)
        meta = {"tile_id": f"tile{t:04d}", "geo_block": t, "grid": [row, col], "ref_date": ref.isoformat(),
                "candidates": cands}
        (tdir / "tile.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sorted(out_dir.glob("tile*"))

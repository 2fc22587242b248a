"""Turns raw per-tile imagery into training-ready patch datasets.

The functions here are pure per-tile transforms; :func:`prepare_dataset`
runs them over a directory of raw tiles and assembles the manifest.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_stack
from .metrics import IGNORE
from .raster import read_raster, write_raster

logger = logging.getLogger(__name__)

DATE_WINDOW_DAYS = 730
BRIGHT_THRESHOLD = 0.8
DEFAULT_WEIGHTS = (0.5, 0.3, 0.2)
MANIFEST_VERSION = 1


class DataError(Exception):
    """Input data is missing, corrupt or insufficient."""


class DateWindowError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class AllMaskedError(DataError):
    pass


# --------------------------------------------------------------------------
# revisit selection


@dataclass(frozen=True)
class RevisitCandidate:
    id: str
    acq_date: dt.date
    ref_date: dt.date
    cloud_fraction: float = 0.0
    invalid_fraction: float = 0.0
    high_reflectance_fraction: float = 0.0

    def __post_init__(self):
        for name in ("cloud_fraction", "invalid_fraction", "high_reflectance_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1] for candidate {self.id}")

    @property
    def days_apart(self) -> int:
        return abs((self.acq_date - self.ref_date).days)

    @classmethod
    def from_dict(cls, d, ref_date):
        return cls(
            id=str(d["id"]),
            acq_date=_as_date(d["acq_date"]),
            ref_date=_as_date(ref_date),
            cloud_fraction=float(d.get("cloud_fraction", 0.0)),
            invalid_fraction=float(d.get("invalid_fraction", 0.0)),
            high_reflectance_fraction=float(d.get("high_reflectance_fraction", 0.0)),
        )


def _as_date(v):
    if isinstance(v, dt.date):
        return v
    return dt.date.fromisoformat(str(v))


def high_reflectance_fraction(image, valid=None, threshold: float = BRIGHT_THRESHOLD) -> float:
    """Fraction of valid pixels where any band exceeds ``threshold``."""
    bright = np.any(np.asarray(image) > threshold, axis=0)
    if valid is None:
        return float(bright.mean())
    valid = np.asarray(valid, dtype=bool)
    return float(bright[valid].mean()) if valid.any() else 1.0


def score_revisit(c: RevisitCandidate):
    """Return the (temporal, completeness, spectral) scores of a candidate."""
    days = c.days_apart
    if days > DATE_WINDOW_DAYS:
        raise DateWindowError(
            f"revisit {c.id} acquired {days} days from the reference date (limit {DATE_WINDOW_DAYS})"
        )
    temporal = min(1.0, max(0.0, 1.0 - days / DATE_WINDOW_DAYS))
    completeness = 1.0 - max(c.cloud_fraction, c.invalid_fraction)
    spectral = 1.0 - c.high_reflectance_fraction
    return temporal, completeness, spectral


def weighted_score(c: RevisitCandidate, weights=DEFAULT_WEIGHTS) -> float:
    return float(sum(w * s for w, s in zip(weights, score_revisit(c))))


def revisit_sort_key(c: RevisitCandidate, weights=DEFAULT_WEIGHTS):
    return (-weighted_score(c, weights), c.days_apart, c.id)


def select_revisits(candidates, k: int = 8, weights=DEFAULT_WEIGHTS, tile_id: str = "?"):
    """Ids of the ``k`` best candidates, best first.

    Candidates outside the date window are dropped before ranking.
    """
    usable = []
    for c in candidates:
        if c.days_apart > DATE_WINDOW_DAYS:
            logger.debug("tile %s: rejecting revisit %s (%d days)", tile_id, c.id, c.days_apart)
            continue
        usable.append(c)
    if len(usable) < k:
        raise InsufficientDataError(
            f"tile {tile_id}: {len(usable)} usable revisits, {k} required"
        )
    ranked = sorted(usable, key=lambda c: revisit_sort_key(c, weights))
    return [c.id for c in ranked[:k]]


# --------------------------------------------------------------------------
# radiometry


def band_percentiles(stack, valid=None, lo_pct: float = 2.0, hi_pct: float = 98.0):
    """Per-band (lo, hi) percentiles over valid pixels.

    ``stack`` is ``C x H x W`` or ``N x C x H x W``; ``valid`` has the same
    shape minus the band axis.
    """
    x = np.asarray(stack, dtype=np.float64)
    band_axis = x.ndim - 3
    if valid is None:
        valid = np.ones(x.shape[:band_axis] + x.shape[band_axis + 1 :], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    x = np.moveaxis(x, band_axis, 0)
    lo, hi = [], []
    for band in x:
        vals = band[valid]
        if vals.size == 0:
            raise DataError("no valid pixels to compute percentiles from")
        p = np.percentile(vals, [lo_pct, hi_pct], method="linear")
        lo.append(p[0])
        hi.append(p[1])
    return np.array(lo), np.array(hi)


def apply_clip_normalize(stack, lo, hi):
    x = np.asarray(stack, dtype=np.float64)
    band_axis = x.ndim - 3
    shape = [1] * x.ndim
    shape[band_axis] = -1
    lo = np.reshape(lo, shape)
    hi = np.reshape(hi, shape)
    span = hi - lo
    out = (np.clip(x, lo, hi) - lo) / np.where(span > 0, span, 1.0)
    out = np.where(span > 0, out, 0.0)
    return out.astype(np.float32)


def clip_normalize(stack, lo_pct: float = 2.0, hi_pct: float = 98.0, valid=None):
    """Clip each band to its percentile range and rescale to [0, 1]."""
    lo, hi = band_percentiles(stack, valid, lo_pct, hi_pct)
    return apply_clip_normalize(stack, lo, hi)


class PercentileNormalizer(TransformerMixin, BaseEstimator):
    """Per-band percentile clipping and [0, 1] scaling as a transformer.

    ``fit`` learns the band percentiles from one tile (``C x H x W`` or a
    stack ``N x C x H x W``); ``transform`` applies them.
    """

    def __init__(self, lo_pct=2.0, hi_pct=98.0):
        self.lo_pct = lo_pct
        self.hi_pct = hi_pct

    def fit(self, X, y=None, valid=None):
        if not 0 <= self.lo_pct < self.hi_pct <= 100:
            raise ValueError("need 0 <= lo_pct < hi_pct <= 100")
        self.lo_, self.hi_ = band_percentiles(X, valid, self.lo_pct, self.hi_pct)
        self.n_bands_ = len(self.lo_)
        return self

    def transform(self, X):
        check_is_fitted(self, "lo_")
        X = np.asarray(X)
        if X.shape[X.ndim - 3] != self.n_bands_:
            raise ValueError(f"expected {self.n_bands_} bands")
        return apply_clip_normalize(X, self.lo_, self.hi_)


def impute_masked(views, masks):
    """Fill invalid pixels with the mean of the valid views at that location.

    Returns the imputed ``N x C x H x W`` stack and all-true masks.
    """
    views, masks = check_stack(views, masks)
    count = masks.sum(axis=0)
    if np.any(count == 0):
        h, w = np.argwhere(count == 0)[0]
        raise AllMaskedError(f"location ({h}, {w}) is invalid in every view")
    m = masks[:, None].astype(np.float64)
    mean = (views.astype(np.float64) * m).sum(axis=0) / count[None]
    out = np.where(masks[:, None], views, mean[None].astype(np.float32))
    return out.astype(np.float32), np.ones_like(masks)


def histogram_match(source, reference):
    """Map ``source`` values onto the empirical distribution of ``reference``.

    Each source value is sent through the source CDF and then through the
    reference's inverse CDF, interpolated linearly between CDF knots. The
    mapping is monotone, so pixel rank order is preserved.
    """
    src = np.asarray(source)
    ref = np.asarray(reference)
    if src.size == 0 or ref.size == 0:
        raise ValueError("histogram matching needs non-empty inputs")
    s_vals, s_idx, s_counts = np.unique(src.ravel(), return_inverse=True, return_counts=True)
    r_vals, r_counts = np.unique(ref.ravel(), return_counts=True)
    s_cdf = np.cumsum(s_counts, dtype=np.float64) / src.size
    r_cdf = np.cumsum(r_counts, dtype=np.float64) / ref.size
    mapped = np.interp(s_cdf, r_cdf, r_vals.astype(np.float64))
    return mapped[s_idx].reshape(src.shape).astype(src.dtype if src.dtype.kind == "f" else np.float64)


class HistogramMatcher(TransformerMixin, BaseEstimator):
    """Per-band histogram matching onto a fitted reference image (``C x H x W``)."""

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 3 or X.size == 0:
            raise ValueError("reference must be a non-empty C x H x W image")
        self.reference_ = X.copy()
        self.n_bands_ = X.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        X = np.asarray(X)
        if X.ndim != 3 or X.shape[0] != self.n_bands_:
            raise ValueError(f"expected a {self.n_bands_}-band C x H x W image")
        return np.stack([histogram_match(s, r) for s, r in zip(X, self.reference_)])


# --------------------------------------------------------------------------
# resampling and tiling


def _bilinear_taps(n_in, n_out):
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def downsample_bilinear(image, out_h: int, out_w: int):
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    x = np.asarray(image)
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dimensions must be positive")
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot downsample {h}x{w} to larger {out_h}x{out_w}")
    x = x.astype(np.float64)
    r0, r1, fr = _bilinear_taps(h, out_h)
    c0, c1, fc = _bilinear_taps(w, out_w)
    rows = x[..., r0, :] * (1 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    out = rows[..., c0] * (1 - fc) + rows[..., c1] * fc
    return out.astype(np.float32)


def patch_origins(n: int, size: int = 64, stride: int = 48):
    if n < size:
        raise ValueError(f"extent {n} smaller than patch size {size}")
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] + size < n:
        origins.append(n - size)
    return origins


def extract_patches(h: int, w: int, size: int = 64, stride: int = 48):
    """Top-left origins of the sliding-window patches covering an ``h x w`` tile."""
    return [(r, c) for r in patch_origins(h, size, stride) for c in patch_origins(w, size, stride)]


def downsample_labels(labels, factor: int, ignore: int = IGNORE):
    """Keep a coarse pixel only where its whole footprint holds a single class."""
    y = np.asarray(labels, dtype=np.uint8)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = y.shape
    ph, pw = -h % factor, -w % factor
    if ph or pw:
        y = np.pad(y, ((0, ph), (0, pw)), constant_values=ignore)
    blocks = y.reshape(y.shape[0] // factor, factor, y.shape[1] // factor, factor)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(blocks.shape[0], blocks.shape[2], -1)
    first = blocks[..., 0]
    pure = np.all(blocks == first[..., None], axis=-1)
    return np.where(pure, first, ignore).astype(np.uint8)


# --------------------------------------------------------------------------
# manifest and splits


def geo_block_of(row: int, col: int, block_rows: int = 2, block_cols: int = 2, blocks_per_row: int = 1000):
    """Geographic block id of a tile on a regular grid of tile indices."""
    return (row // block_rows) * blocks_per_row + col // block_cols


@dataclass
class DatasetManifest:
    tiles: list
    seed: int
    created: str
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False, repr=False)

    def to_dict(self):
        return {"created": self.created, "seed": self.seed, "tiles": self.tiles, "version": self.version}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        self.root = path.parent

    @classmethod
    def read(cls, path, check_files: bool = True):
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        missing = {"tiles", "seed", "created", "version"} - set(d)
        if missing:
            raise DataError(f"manifest {path} lacks keys {sorted(missing)}")
        m = cls(tiles=d["tiles"], seed=int(d["seed"]), created=d["created"], version=int(d["version"]), root=path.parent)
        if check_files:
            for f in m.files():
                if not f.exists():
                    raise DataError(f"manifest references missing file {f}")
        return m

    def files(self):
        root = self.root or Path(".")
        for t in self.tiles:
            for p in t.get("patches", []):
                for key in ("lr", "mask", "hr", "labels"):
                    if p.get(key):
                        yield root / p[key]

    def split(self, name):
        return [t for t in self.tiles if t["split"] == name]

    def patches(self, split):
        root = self.root or Path(".")
        for t in self.split(split):
            for p in t.get("patches", []):
                yield t["tile_id"], {k: (root / v if k in ("lr", "mask", "hr", "labels") and v else v) for k, v in p.items()}


def split_counts(n_blocks: int, fractions=(0.7, 0.2, 0.1)):
    if n_blocks < len(fractions):
        raise ValueError(f"{n_blocks} geo blocks cannot fill {len(fractions)} splits")
    n_test = max(1, round(fractions[2] * n_blocks))
    n_val = max(1, round(fractions[1] * n_blocks))
    n_train = n_blocks - n_val - n_test
    if n_train < 1:
        n_val -= 1
        n_train = 1
    return n_train, n_val, n_test


def split_dataset(tiles, fractions=(0.7, 0.2, 0.1), seed: int = 0, created: str = "1970-01-01T00:00:00Z"):
    """Assign whole geographic blocks to train/val/test.

    The test split is the contiguous run of highest block ids; validation
    blocks are drawn from the rest with a seeded RNG.
    """
    blocks = sorted({t["geo_block"] for t in tiles})
    n_train, n_val, n_test = split_counts(len(blocks), fractions)
    test = set(blocks[len(blocks) - n_test :])
    rest = blocks[: len(blocks) - n_test]
    val = set(random.Random(seed).sample(rest, n_val))
    out = []
    for t in sorted(tiles, key=lambda t: t["tile_id"]):
        b = t["geo_block"]
        split = "test" if b in test else "val" if b in val else "train"
        out.append({**t, "split": split})
    return DatasetManifest(tiles=out, seed=seed, created=created)


# --------------------------------------------------------------------------
# raw tile preparation

RAW_TILE_FILE = "tile.json"


@dataclass
class PrepareConfig:
    n_revisits: int = 8
    scale: int = 4
    patch: int = 64
    stride: int = 48
    lo_pct: float = 2.0
    hi_pct: float = 98.0
    weights: tuple = DEFAULT_WEIGHTS
    fractions: tuple = (0.7, 0.2, 0.1)


def prepare_tile(tile_dir, out_dir, cfg: PrepareConfig):
    """Process one raw tile directory into patch files; returns the tile record."""
    tile_dir = Path(tile_dir)
    try:
        meta = json.loads((tile_dir / RAW_TILE_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{tile_dir}: unreadable {RAW_TILE_FILE}: {exc}") from exc
    tile_id = str(meta["tile_id"])
    candidates = [RevisitCandidate.from_dict(c, meta["ref_date"]) for c in meta["candidates"]]
    chosen = select_revisits(candidates, cfg.n_revisits, cfg.weights, tile_id)
    by_id = {c.id: c for c in candidates}

    views = np.stack([read_raster(tile_dir / "lr" / f"{i}.s4xr", np.float32) for i in chosen])
    masks = np.stack([read_raster(tile_dir / "lr" / f"{i}_mask.s4xr", np.uint8) for i in chosen]).astype(bool)
    views, masks = check_stack(views, masks)
    views = clip_normalize(views, cfg.lo_pct, cfg.hi_pct, valid=masks)
    views, _ = impute_masked(views, masks)
    h, w = views.shape[-2:]

    hr = read_raster(tile_dir / "hr.s4xr", np.float32)
    hr = clip_normalize(hr, 0.0, 100.0)
    # align HR radiometry with the best-ranked revisit
    hr = HistogramMatcher().fit(views[0]).transform(hr)
    hr = downsample_bilinear(hr, cfg.scale * h, cfg.scale * w)

    labels = None
    if (tile_dir / "labels.s4xr").exists():
        fine = read_raster(tile_dir / "labels.s4xr", np.uint8)
        factor = fine.shape[0] // (cfg.scale * h)
        if factor < 1 or fine.shape[0] != factor * cfg.scale * h or fine.shape[1] != factor * cfg.scale * w:
            raise DataError(f"tile {tile_id}: label grid {fine.shape} is not a multiple of the HR grid")
        labels = downsample_labels(fine, factor)

    out_dir = Path(out_dir)
    patches = []
    s, hs = cfg.patch, cfg.patch * cfg.scale
    for r, c in extract_patches(h, w, cfg.patch, cfg.stride):
        name = f"{tile_id}_{r:03d}_{c:03d}"
        rel = Path("patches") / name
        write_raster(views[:, :, r : r + s, c : c + s], out_dir / rel / "lr.s4xr")
        R, C = r * cfg.scale, c * cfg.scale
        write_raster(hr[:, R : R + hs, C : C + hs], out_dir / rel / "hr.s4xr")
        rec = {"id": name, "origin": [r, c], "lr": str(rel / "lr.s4xr"), "hr": str(rel / "hr.s4xr")}
        if labels is not None:
            write_raster(labels[R : R + hs, C : C + hs], out_dir / rel / "labels.s4xr")
            rec["labels"] = str(rel / "labels.s4xr")
        patches.append(rec)
    return {
        "tile_id": tile_id,
        "geo_block": int(meta["geo_block"]),
        "revisits": [{"id": i, "score": round(weighted_score(by_id[i], cfg.weights), 12)} for i in chosen],
        "patches": patches,
    }


def prepare_dataset(raw_dir, out_dir, cfg: PrepareConfig | None = None, seed: int = 0,
                    threads: int = 1, created: str = "1970-01-01T00:00:00Z"):
    """Prepare every raw tile under ``raw_dir`` and write ``manifest.json``."""
    cfg = cfg or PrepareConfig()
    tile_dirs = sorted(p for p in Path(raw_dir).iterdir() if (p / RAW_TILE_FILE).exists())
    if not tile_dirs:
        raise DataError(f"no raw tiles found under {raw_dir}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(lambda d: prepare_tile(d, out_dir, cfg), tile_dirs))
    manifest = split_dataset(records, cfg.fractions, seed=seed, created=created)
    manifest.write(Path(out_dir) / "manifest.json")
    return manifest


def default_created() -> str:
    """Manifest timestamp; honours SOURCE_DATE_EPOCH so reruns stay byte-identical."""
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return dt.datetime.fromtimestamp(epoch, tz=dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_patch_arrays(manifest: DatasetManifest, split: str, with_labels: bool = False):
    """Stack the LR views, HR targets (and labels) of one split into arrays."""
    lrs, hrs, labels, ids = [], [], [], []
    for _, p in manifest.patches(split):
        lrs.append(read_raster(p["lr"], np.float32))
        hrs.append(read_raster(p["hr"], np.float32))
        if with_labels:
            if "labels" not in p:
                raise DataError(f"patch {p['id']} has no labels")
            labels.append(read_raster(p["labels"], np.uint8))
        ids.append(p["id"])
    if not lrs:
        raise DataError(f"split '{split}' is empty")
    out = [np.stack(lrs), np.stack(hrs)]
    if with_labels:
        out.append(np.stack(labels))
    return (*out, ids)


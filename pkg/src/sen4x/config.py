"""Plain-text ``key = value`` configuration shared by all CLI commands.

Blank lines and ``#`` comments are ignored; ``key: value`` is accepted
too. Every key has a default; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


# key -> (type, default, help)
SCHEMA = {
    # model
    "mode": (str, "hybrid_early", "hybrid_early | hybrid_late | sisr_only | misr_only"),
    "n_views": (int, 8, "revisits per stack"),
    "embed_dim": (int, 258, "feature channels"),
    "n_rstb": (int, 6, "residual Swin transformer blocks"),
    "heads": (int, 6, "attention heads"),
    "window": (int, 8, "attention window side"),
    "rstb_depth": (int, 6, "transformer layers per RSTB"),
    "mlp_ratio": (float, 2.0, "MLP hidden width / embed_dim"),
    "scale": (int, 4, "upsampling factor"),
    "anchor": (_bool, True, "add a bilinear-upsampled best view to the output"),
    # SR training
    "lr0": (float, 1e-4, "initial learning rate"),
    "lr_min": (float, 0.0, "final learning rate"),
    "epochs": (int, 100, "SR epochs"),
    "batches_per_epoch": (int, 4, "optimizer steps per epoch"),
    "batch_size": (int, 8, "SR patches per batch"),
    "warmup_frac": (float, 0.05, "fraction of steps spent in linear warm-up"),
    "loss": (str, "L1", "L1 | L2"),
    "val_every": (int, 1, "epochs between validation passes"),
    # land cover
    "n_classes": (int, 7, "land-cover classes"),
    "lc_lr0": (float, 1e-4, "segmentation initial learning rate"),
    "lc_lr_min": (float, 1e-8, "segmentation final learning rate"),
    "lc_batch_size": (int, 16, "segmentation batch size"),
    "lc_max_epochs": (int, 1000, "segmentation epoch cap"),
    "lc_patience": (int, 25, "early-stopping patience in epochs"),
    "lc_stem": (int, 16, "segmentation stem width"),
    "lc_widths": (_ints, [32, 64, 128, 256], "encoder widths at 1/4..1/32"),
    "lc_fpn_dim": (int, 64, "feature pyramid width"),
    # data preparation
    "n_revisits": (int, 8, "revisits kept per tile"),
    "patch": (int, 64, "LR patch side"),
    "stride": (int, 48, "LR patch stride"),
    "lo_pct": (float, 2.0, "lower clipping percentile"),
    "hi_pct": (float, 98.0, "upper clipping percentile"),
    "w_temporal": (float, 0.5, "revisit score weight: date proximity"),
    "w_completeness": (float, 0.3, "revisit score weight: cloud/invalid"),
    "w_spectral": (float, 0.2, "revisit score weight: bright pixels"),
    "train_frac": (float, 0.7, "training fraction of geo blocks"),
    "val_frac": (float, 0.2, "validation fraction of geo blocks"),
    "test_frac": (float, 0.1, "test fraction of geo blocks"),
    # synthetic data
    "n_train": (int, 200, "synthetic training stacks"),
    "n_val": (int, 40, "synthetic validation stacks"),
    "n_test": (int, 0, "synthetic test stacks"),
    "hr_size": (int, 64, "synthetic HR patch side"),
    "shift_max": (float, 0.5, "max sub-pixel shift, LR pixels"),
    "blur_sigma": (float, 1.2, "blur sigma, HR pixels"),
    "noise_sigma": (float, 0.01, "additive noise sigma"),
    "mask_fraction": (float, 0.05, "invalid pixel fraction per view"),
    # common
    "seed": (int, 0, "global seed"),
}


def defaults() -> dict:
    return {k: (list(v[1]) if isinstance(v[1], list) else v[1]) for k, v in SCHEMA.items()}


def coerce(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key '{key}'")
    try:
        return SCHEMA[key][0](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{key}': {value!r} ({exc})") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides`` (None values skipped)."""
    cfg = defaults()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_config_text(text))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(k, v)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()

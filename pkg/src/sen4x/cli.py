"""Command-line entry point: ``sen4x <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError
from .config import SCHEMA, ConfigError, config_hash, load_config
from .datapipe import DataError, DatasetManifest, PrepareConfig, default_created, load_patch_arrays, prepare_dataset
from .metrics import confusion, dumps_report, image_report, seg_report, seg_scores
from .raster import RasterFormatError, read_raster, write_raster
from .train import NumericError

logger = logging.getLogger("sen4x")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("synth", "prepare", "train-sr", "infer", "eval-image", "train-lc", "eval-lc", "grad-check", "params")
NEEDS_OUT = {"synth", "prepare", "train-sr", "infer", "train-lc"}


class ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--threads", type=int, help="worker threads (default: $SEN4X_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")
    cfg_flags = common.add_argument_group("config overrides")
    for key, (_, default, help_) in SCHEMA.items():
        cfg_flags.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                               help=f"{help_} (default {default})")

    parser = _Parser(prog="sen4x", description="Multi-view satellite super-resolution toolkit")
    parser.add_argument("--version", action="version", version=f"sen4x {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--out", required=name in NEEDS_OUT, help="output directory")
        return p

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--raw", action="store_true", help="write raw tiles for 'prepare' instead")
    p.add_argument("--n-tiles", type=int, default=10)
    p.add_argument("--tile-size", type=int, default=158)

    p = add("prepare", "turn raw tiles into a patch dataset")
    p.add_argument("--raw-dir", required=True)

    p = add("train-sr", "train the super-resolution network")
    p.add_argument("--manifest", required=True)

    p = add("infer", "super-resolve stacks with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--input", help="single N x C x h x w stack raster")
    p.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    p.add_argument("--png", action="store_true", help="also export 8-bit RGB previews")

    p = add("eval-image", "PSNR/SSIM of predictions against references")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pred")
    g.add_argument("--predictions", help="predictions.json written by 'infer'")
    p.add_argument("--ref")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")

    p = add("train-lc", "train the land-cover segmenter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", default="hr", choices=("hr", "sr", "bicubic"))
    p.add_argument("--predictions")

    p = add("eval-lc", "evaluate land-cover predictions")
    p.add_argument("--pred", help="predicted label raster")
    p.add_argument("--ref", help="reference label raster")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--source", default="hr", choices=("hr", "sr", "bicubic"))
    p.add_argument("--predictions")

    p = add("grad-check", "autograd vs finite differences on a small network")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--patch-size", type=int, default=16)

    add("params", "count trainable parameters")
    return parser


def git_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_threads(flag):
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("SEN4X_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"SEN4X_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# config adapters


def model_config(cfg):
    from .model import ModelConfig

    keys = ("mode", "n_views", "embed_dim", "n_rstb", "heads", "window", "rstb_depth", "mlp_ratio", "scale", "anchor")
    try:
        return ModelConfig(**{k: cfg[k] for k in keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg):
    from .train import TrainConfig

    keys = ("lr0", "lr_min", "epochs", "batches_per_epoch", "batch_size", "warmup_frac", "loss", "seed", "val_every")
    try:
        return TrainConfig(**{k: cfg[k] for k in keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def seg_config(cfg):
    from .landcover import SegConfig

    try:
        return SegConfig(n_classes=cfg["n_classes"], stem=cfg["lc_stem"], widths=tuple(cfg["lc_widths"]),
                         fpn_dim=cfg["lc_fpn_dim"], batch_size=cfg["lc_batch_size"], max_epochs=cfg["lc_max_epochs"],
                         patience=cfg["lc_patience"], lr0=cfg["lc_lr0"], lr_min=cfg["lc_lr_min"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(report, out):
    text = dumps_report(report)
    sys.stdout.write(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "report.json").write_text(text, encoding="utf-8")


def cmd_synth(args, cfg):
    from .synth import SynthConfig, synth_dataset, synth_raw_tiles

    if args.raw:
        synth_raw_tiles(args.out, n_tiles=args.n_tiles, tile_lr=args.tile_size, seed=cfg["seed"])
        return
    degrade = {k: cfg[k] for k in ("shift_max", "blur_sigma", "noise_sigma", "mask_fraction")}
    degrade.update(n_views=cfg["n_views"], scale=cfg["scale"])
    sc = SynthConfig(n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"], hr_size=cfg["hr_size"],
                     seed=cfg["seed"], degrade=degrade)
    synth_dataset(args.out, sc, created=default_created())


def cmd_prepare(args, cfg):
    pc = PrepareConfig(n_revisits=cfg["n_revisits"], scale=cfg["scale"], patch=cfg["patch"], stride=cfg["stride"],
                       lo_pct=cfg["lo_pct"], hi_pct=cfg["hi_pct"],
                       weights=(cfg["w_temporal"], cfg["w_completeness"], cfg["w_spectral"]),
                       fractions=(cfg["train_frac"], cfg["val_frac"], cfg["test_frac"]))
    prepare_dataset(args.raw_dir, args.out, pc, seed=cfg["seed"], threads=args.threads, created=default_created())


def cmd_train_sr(args, cfg):
    from .train import train_sr

    mcfg, tcfg = model_config(cfg), train_config(cfg)
    manifest = DatasetManifest.read(args.manifest)
    train_sr(manifest, mcfg, tcfg, out_dir=args.out)


def _rgb_png(image, path):
    from PIL import Image

    rgb = np.clip(image[:3].transpose(1, 2, 0), 0, 1)
    Image.fromarray((rgb * 255 + 0.5).astype(np.uint8)).save(path)


def cmd_infer(args, cfg):
    from .train import load_network, predict_batches

    net, _ = load_network(args.checkpoint)
    mc = net.cfg
    out = Path(args.out)

    def check(stack, label):
        views_ok = stack.shape[0] >= mc.views_used if mc.mode == "sisr_only" else stack.shape[0] == mc.n_views
        if stack.ndim != 4 or not views_ok or stack.shape[1] != mc.in_channels:
            raise DataError(f"{label}: stack shape {stack.shape} does not match checkpoint "
                            f"(views={mc.n_views}, channels={mc.in_channels}, mode={mc.mode})")
        if mc.mode != "misr_only" and (stack.shape[2] % mc.window or stack.shape[3] % mc.window):
            raise DataError(f"{label}: patch {stack.shape[2:]} not divisible by window {mc.window}")

    if args.input:
        stack = read_raster(args.input, np.float32)
        check(stack, args.input)
        sr = predict_batches(net, stack[None, : mc.views_used])[0]
        write_raster(sr, out / "sr.s4xr")
        if args.png:
            _rgb_png(sr, out / "sr.png")
        return
    manifest = DatasetManifest.read(args.manifest)
    splits = ("train", "val", "test") if args.split == "all" else (args.split,)
    index = {}
    for split in splits:
        for _, p in manifest.patches(split):
            stack = read_raster(p["lr"], np.float32)
            check(stack, p["id"])
            sr = predict_batches(net, stack[None, : mc.views_used])[0]
            rel = Path("sr") / f"{p['id']}.s4xr"
            write_raster(sr, out / rel)
            if args.png:
                _rgb_png(sr, out / "sr" / f"{p['id']}.png")
            index[p["id"]] = str(rel)
    _write_json(out / "predictions.json", {"checkpoint": str(args.checkpoint), "images": index})


def _load_predictions(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read predictions {path}: {exc}") from exc
    return {k: path.parent / v for k, v in d["images"].items()}


def cmd_eval_image(args, cfg):
    from .metrics import psnr, ssim

    if args.pred:
        if not args.ref:
            raise ConfigError("--pred needs --ref")
        pred, ref = read_raster(args.pred, np.float32), read_raster(args.ref, np.float32)
        if pred.shape != ref.shape:
            raise DataError(f"shape mismatch: {pred.shape} vs {ref.shape}")
        _emit(image_report(pred, ref), args.out)
        return
    if not args.manifest:
        raise ConfigError("--predictions needs --manifest")
    preds = _load_predictions(args.predictions)
    manifest = DatasetManifest.read(args.manifest)
    ps, ss = [], []
    for _, p in manifest.patches(args.split):
        if p["id"] not in preds:
            raise DataError(f"no prediction for patch {p['id']}")
        a = np.clip(read_raster(preds[p["id"]], np.float32), 0, 1)
        b = read_raster(p["hr"], np.float32)
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    if not ps:
        raise DataError(f"split '{args.split}' is empty")
    report = {"psnr_db": float(np.mean(ps)), "ssim": float(np.mean(ss)), "n": len(ps)}
    if np.isinf(report["psnr_db"]):
        report["psnr_db"] = "inf"
    _emit(report, args.out)


def _lc_inputs(manifest, split, source, predictions):
    from .estimators import upsample_anchor

    X, y, labels, ids = load_patch_arrays(manifest, split, with_labels=True)
    if source == "hr":
        return y, labels
    if source == "bicubic":
        return upsample_anchor(X, y.shape[-1] // X.shape[-1]), labels
    if not predictions:
        raise ConfigError("--source sr needs --predictions")
    preds = _load_predictions(predictions)
    missing = [i for i in ids if i not in preds]
    if missing:
        raise DataError(f"no SR prediction for patches {missing[:3]}...")
    return np.clip(np.stack([read_raster(preds[i], np.float32) for i in ids]), 0, 1), labels


def cmd_train_lc(args, cfg):
    from .estimators import LandCoverSegmenter

    sc = seg_config(cfg)
    manifest = DatasetManifest.read(args.manifest)
    X, y = _lc_inputs(manifest, "train", args.source, args.predictions)
    Xv, yv = _lc_inputs(manifest, "val", args.source, args.predictions)
    est = LandCoverSegmenter(n_classes=sc.n_classes, stem=sc.stem, widths=sc.widths, fpn_dim=sc.fpn_dim,
                             batch_size=sc.batch_size, max_epochs=sc.max_epochs, patience=sc.patience,
                             lr0=sc.lr0, lr_min=sc.lr_min, seed=sc.seed)
    est.fit(X, y, Xv, yv)
    out = Path(args.out)
    est.save(out / "landcover.ckpt")
    _write_json(out / "val_scores.json", seg_report(est.val_scores_))


def cmd_eval_lc(args, cfg):
    if args.pred or args.ref:
        if not (args.pred and args.ref):
            raise ConfigError("--pred and --ref go together")
        pred = read_raster(args.pred, np.uint8)
        ref = read_raster(args.ref, np.uint8)
        if pred.shape != ref.shape:
            raise DataError(f"shape mismatch: {pred.shape} vs {ref.shape}")
        try:
            _emit(seg_report(seg_scores(confusion(pred, ref, cfg["n_classes"]))), args.out)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        return
    if not (args.checkpoint and args.manifest):
        raise ConfigError("eval-lc needs --pred/--ref or --checkpoint/--manifest")
    from .estimators import LandCoverSegmenter

    est = LandCoverSegmenter.load(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    X, y = _lc_inputs(manifest, args.split, args.source, args.predictions)
    pred = est.predict(X)
    if args.out:
        ids = [p["id"] for _, p in manifest.patches(args.split)]
        for i, p in zip(ids, pred):
            write_raster(p, Path(args.out) / "labels" / f"{i}.s4xr")
    _emit(seg_report(seg_scores(confusion(pred, y, est.n_classes))), args.out)


def cmd_grad_check(args, cfg):
    from .train import grad_check

    mc = model_config(cfg)
    if args.eps <= 0:
        raise ConfigError("--eps must be positive")
    rep = grad_check(mc, n_samples=args.samples, eps=args.eps, seed=cfg["seed"], patch=args.patch_size)
    errs = np.array([r["rel_error"] for r in rep])
    _emit({"n": len(rep), "max_rel_error": float(errs.max()), "frac_below_1e-2": float(np.mean(errs < 1e-2)),
           "samples": rep}, args.out)


def cmd_params(args, cfg):
    from .model import count_parameters

    _emit(count_parameters(model_config(cfg)), args.out)


HANDLERS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train-sr": cmd_train_sr, "infer": cmd_infer,
    "eval-image": cmd_eval_image, "train-lc": cmd_train_lc, "eval-lc": cmd_eval_lc,
    "grad-check": cmd_grad_check, "params": cmd_params,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k) for k in SCHEMA}
        cfg = load_config(args.config, overrides)
        args.threads = resolve_threads(args.threads)
    except (ArgumentError, ConfigError) as exc:
        print(f"sen4x: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    torch.manual_seed(cfg["seed"])
    print(json.dumps({"command": args.command, "seed": cfg["seed"], "config": cfg}, sort_keys=True), file=sys.stderr)
    try:
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"sen4x: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RasterFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"sen4x: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sen4x: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out:
        _write_json(Path(args.out) / "run.json", {
            "command": args.command,
            "argv": list(argv if argv is not None else sys.argv[1:]),
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seed": cfg["seed"],
            "version": git_version(),
        })
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Optimisation loop for the super-resolution network."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .metrics import psnr
from .model import ModelConfig, Sen4xNet, build_network

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 100
    batches_per_epoch: int = 4
    batch_size: int = 8
    warmup_frac: float = 0.05
    loss: str = "L1"
    seed: int = 0
    grad_clip: float = 0.0
    val_every: int = 1

    def __post_init__(self):
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError("need lr0 > lr_min >= 0")
        if self.epochs * self.batches_per_epoch < 2:
            raise ValueError("need at least two optimizer steps")
        if self.loss not in ("L1", "L2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or not 0 < self.warmup_frac < 1:
            raise ValueError("batch_size must be positive and warmup_frac in (0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def warmup_steps(total: int, warmup_frac: float) -> int:
    return max(1, math.ceil(warmup_frac * total))


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr0`` followed by cosine annealing to ``lr_min``."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    w = warmup_steps(total, cfg.warmup_frac)
    if step < w:
        return cfg.lr0 * (step + 1) / w
    if total == w:
        return cfg.lr0
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def sr_loss(pred, target, kind: str = "L1"):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    if kind == "L1":
        return diff.abs().mean()
    if kind == "L2":
        return (diff * diff).mean()
    raise ValueError(f"unknown loss {kind!r}")


def batch_indices(n: int, step: int, cfg: TrainConfig):
    """Sample indices of the batch used at ``step``.

    Each epoch draws a fresh permutation from ``(seed, epoch)``, so any step
    can be reproduced without carrying RNG state across a resume.
    """
    epoch, b = divmod(step, cfg.batches_per_epoch)
    need = cfg.batches_per_epoch * cfg.batch_size
    rng = np.random.default_rng([cfg.seed, epoch])
    perm = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])
    return perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoint: str | None = None

    def lines(self):
        for rec in self.steps:
            yield json.dumps({"kind": "step", **rec}, sort_keys=True)
        for rec in self.epochs:
            yield json.dumps({"kind": "epoch", **rec}, sort_keys=True)

    def write(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")


def predict_batches(net: nn.Module, X: np.ndarray, batch_size: int = 8) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    outs = []
    net.eval()
    with torch.no_grad():
        for i in range(0, len(X), batch_size):
            outs.append(net(torch.as_tensor(X[i : i + batch_size], dtype=dtype)).cpu().numpy())
    return np.concatenate(outs).astype(np.float32)


def mean_psnr(pred, target) -> float:
    return float(np.mean([psnr(np.clip(p, 0, 1), t) for p, t in zip(pred, target)]))


@dataclass
class FitResult:
    log: TrainLog
    best_state: dict | None
    best_val_psnr: float
    optimizer: torch.optim.Optimizer
    step: int


def fit_network(net: Sen4xNet, X, y, cfg: TrainConfig, X_val=None, y_val=None, *,
                start_step: int = 0, stop_step: int | None = None, optimizer_tensors=None,
                out_dir=None, model_config: ModelConfig | None = None) -> FitResult:
    """Train ``net`` in place on LR stacks ``X`` (S x N x C x h x w) and HR targets ``y``.

    ``start_step``/``stop_step`` allow a run to be split and resumed; the
    optimizer moments are restored from ``optimizer_tensors`` (as produced by
    :func:`checkpoint.state_tensors`).
    """
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("training data is empty or misaligned")
    total = cfg.total_steps
    stop = total if stop_step is None else min(stop_step, total)
    views = net.cfg.views_used
    X = np.asarray(X, dtype=np.float32)[:, :views] if net.cfg.mode == "sisr_only" else np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    dtype = next(net.parameters()).dtype
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    if optimizer_tensors:
        checkpoint.load_optimizer_state(net, opt, optimizer_tensors)
    log = TrainLog()
    best_psnr, best_state = -math.inf, None
    mcfg = (model_config or net.cfg).to_dict()

    for step in range(start_step, stop):
        net.train()
        lr = lr_at(step, total, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = batch_indices(len(X), step, cfg)
        xb = torch.as_tensor(X[idx], dtype=dtype)
        yb = torch.as_tensor(y[idx], dtype=dtype)
        opt.zero_grad(set_to_none=True)
        loss = sr_loss(net(xb), yb, cfg.loss)
        value = float(loss.item())
        if not math.isfinite(value):
            raise NumericError(step, value)
        loss.backward()
        if cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        log.steps.append({"step": step, "lr": lr, "loss": value})

        epoch, b = divmod(step, cfg.batches_per_epoch)
        end_of_epoch = b == cfg.batches_per_epoch - 1
        if X_val is not None and end_of_epoch and ((epoch + 1) % cfg.val_every == 0 or step == total - 1):
            pred = predict_batches(net, X_val[:, :views] if net.cfg.mode == "sisr_only" else X_val)
            val_loss = float(sr_loss(torch.from_numpy(pred), torch.as_tensor(y_val, dtype=torch.float32), cfg.loss))
            val_psnr = mean_psnr(pred, y_val)
            log.epochs.append({"epoch": epoch, "step": step, "val_psnr": val_psnr, "val_loss": val_loss})
            logger.info("epoch %d step %d loss %.5f val psnr %.3f", epoch, step, value, val_psnr)
            if val_psnr > best_psnr:
                best_psnr = val_psnr
                best_state = copy.deepcopy(net.state_dict())
                if out_dir is not None:
                    checkpoint.save(Path(out_dir) / "best.ckpt", "sr", mcfg, net, None, step + 1, cfg.seed,
                                    {"train": cfg.to_dict(), "val_psnr": val_psnr})

    if out_dir is not None:
        path = Path(out_dir) / "last.ckpt"
        checkpoint.save(path, "sr", mcfg, net, opt, stop, cfg.seed, {"train": cfg.to_dict()})
        log.checkpoint = str(path)
        log.write(Path(out_dir) / "train_log.jsonl")
    return FitResult(log, best_state, best_psnr, opt, stop)


def train_sr(manifest, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None):
    """Train from a prepared dataset manifest; returns ``(network, FitResult)``."""
    from .datapipe import DataError, load_patch_arrays

    X, y, _ = load_patch_arrays(manifest, "train")
    try:
        Xv, yv, _ = load_patch_arrays(manifest, "val")
    except DataError as exc:
        raise DataError(f"manifest has no validation patches: {exc}") from exc
    if X.shape[1] < model_cfg.views_used:
        raise DataError(f"patches hold {X.shape[1]} views, model needs {model_cfg.views_used}")
    net = build_network(model_cfg, seed=train_cfg.seed)
    res = fit_network(net, X, y, train_cfg, Xv, yv, out_dir=out_dir, model_config=model_cfg)
    return net, res


def load_network(path) -> tuple[Sen4xNet, dict]:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "sr":
        raise checkpoint.CheckpointError(f"{path} is not a super-resolution checkpoint")
    net = Sen4xNet(ModelConfig.from_dict(header["config"]))
    checkpoint.load_module_state(net, tensors)
    return net, header


# --------------------------------------------------------------------------
# gradient verification


def relative_error(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(model, n_samples: int = 50, eps: float = 1e-3, seed: int = 0, inputs=None, patch: int = 16):
    """Compare autograd gradients with central differences on random coordinates.

    ``model`` is a :class:`ModelConfig` (a network is built from it) or any
    module taking the ``inputs`` tensor. Everything runs in float64. The
    scalar probed is ``sum(output * R)`` for a fixed random ``R``.
    Returns a list of dicts with ``name``, ``index``, ``analytic``,
    ``numeric`` and ``rel_error``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    gen = torch.Generator().manual_seed(seed)
    if isinstance(model, ModelConfig):
        net = build_network(model, seed=seed)
        if inputs is None:
            inputs = torch.rand(1, model.n_views, model.in_channels, patch, patch, generator=gen)
    else:
        net = model
        if inputs is None:
            raise ValueError("inputs are required when passing a module")
    net = net.double()
    inputs = torch.as_tensor(inputs).double()
    with torch.no_grad():
        probe = torch.randn(net(inputs).shape, generator=gen, dtype=torch.float64)

    def objective():
        return (net(inputs) * probe).sum()

    net.zero_grad()
    objective().backward()
    params = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in params], dtype=np.int64)
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=n_samples, replace=False)
    bounds = np.cumsum(sizes)
    report = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            name, p = params[k]
            i = int(f - (bounds[k - 1] if k else 0))
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            fp = objective().item()
            view[i] = orig - eps
            fm = objective().item()
            view[i] = orig
            numeric = (fp - fm) / (2 * eps)
            analytic = p.grad.view(-1)[i].item()
            report.append({"name": name, "index": i, "analytic": analytic, "numeric": numeric,
                           "rel_error": relative_error(analytic, numeric)})
    return report

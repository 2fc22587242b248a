"""Desk-scale land-cover segmentation harness.

A strided convolutional encoder yields features at 1/4, 1/8, 1/16 and
1/32 of the input size, a feature pyramid merges them top-down, and a
U-net style decoder restores full resolution with skip connections.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import IGNORE, N_CLASSES, confusion, seg_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegConfig:
    n_classes: int = N_CLASSES
    in_channels: int = 4
    stem: int = 16
    widths: tuple = (32, 64, 128, 256)
    fpn_dim: int = 64
    batch_size: int = 16
    max_epochs: int = 1000
    patience: int = 25
    lr0: float = 1e-4
    lr_min: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("encoder needs exactly four stage widths")
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError("need lr0 > lr_min >= 0")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def _conv(cin, cout, stride=1, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.GELU())


class SegNet(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        w0, (w1, w2, w3, w4), f = cfg.stem, cfg.widths, cfg.fpn_dim
        self.stem = _conv(cfg.in_channels, w0)
        self.down = _conv(w0, w0, stride=2)
        self.stages = nn.ModuleList(
            nn.Sequential(_conv(cin, cout, stride=2), _conv(cout, cout))
            for cin, cout in zip((w0, w1, w2, w3), (w1, w2, w3, w4))
        )
        self.lateral = nn.ModuleList(nn.Conv2d(c, f, 1) for c in (w1, w2, w3, w4))
        self.smooth = _conv(f, f)
        self.dec2 = _conv(f + w0, f)
        self.dec1 = _conv(f + w0, f)
        self.classify = nn.Conv2d(f, cfg.n_classes, 1)

    def encode(self, x):
        s1 = self.stem(x)
        s2 = self.down(s1)
        feats, y = [], s2
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return s1, s2, feats

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must be divisible by 32")
        s1, s2, feats = self.encode(x)
        p = self.lateral[3](feats[3])
        for lat, c in zip(self.lateral[2::-1], feats[2::-1]):
            p = lat(c) + F.interpolate(p, size=c.shape[-2:], mode="nearest")
        p = self.smooth(p)
        d = F.interpolate(p, size=s2.shape[-2:], mode="bilinear", align_corners=False)
        d = self.dec2(torch.cat([d, s2], dim=1))
        d = F.interpolate(d, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        d = self.dec1(torch.cat([d, s1], dim=1))
        return self.classify(d)


def build_segnet(cfg: SegConfig) -> SegNet:
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        return SegNet(cfg)
    finally:
        torch.random.set_rng_state(state)


def masked_ce(logits, labels, ignore: int = IGNORE):
    """Mean cross-entropy over pixels whose label is not ``ignore``."""
    labels = torch.as_tensor(labels).long()
    if logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError("logits and labels differ in spatial size")
    if not torch.any(labels != ignore):
        raise ValueError("every pixel is ignored")
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    return F.cross_entropy(logits, labels, ignore_index=ignore, reduction="mean")


@dataclass
class EarlyStopState:
    best_val: float = math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0

    def update(self, epoch: int, val: float, patience: int) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if val < self.best_val:
            self.best_val, self.best_epoch, self.epochs_since_best = val, epoch, 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best > patience


def cosine_lr(epoch: int, cfg: SegConfig) -> float:
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.max_epochs))


def predict_logits(net, X, batch_size=16):
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(X), batch_size):
            out.append(net(torch.as_tensor(X[i : i + batch_size], dtype=torch.float32)))
    return torch.cat(out)


def evaluate(net, X, y):
    logits = predict_logits(net, X)
    loss = float(masked_ce(logits, y))
    pred = logits.argmax(dim=1).numpy().astype(np.uint8)
    return loss, seg_scores(confusion(pred, y, net.cfg.n_classes))


@dataclass
class LCResult:
    net: SegNet
    stop: EarlyStopState
    epochs_run: int
    history: list
    val_scores: object


def train_lc(X, y, X_val, y_val, cfg: SegConfig) -> LCResult:
    """Adam with cosine annealing and early stopping on validation masked CE.

    Returns the network restored to its best-validation weights.
    """
    if len(X) == 0 or len(X_val) == 0:
        raise ValueError("land-cover training needs non-empty train and validation sets")
    X = np.asarray(X, np.float32)
    y = np.asarray(y)
    net = build_segnet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr0)
    stop = EarlyStopState()
    best_state = copy.deepcopy(net.state_dict())
    history = []
    epoch = 0
    for epoch in range(cfg.max_epochs):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(epoch, cfg)
        net.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(X))
        for i in range(0, len(X), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if not np.any(y[idx] != IGNORE):
                continue
            opt.zero_grad(set_to_none=True)
            loss = masked_ce(net(torch.from_numpy(X[idx])), torch.from_numpy(y[idx].astype(np.int64)))
            loss.backward()
            opt.step()
        val_loss, _ = evaluate(net, X_val, y_val)
        history.append(val_loss)
        improved = val_loss < stop.best_val
        halt = stop.update(epoch, val_loss, cfg.patience)
        if improved:
            best_state = copy.deepcopy(net.state_dict())
        logger.debug("lc epoch %d val loss %.4f", epoch, val_loss)
        if halt:
            break
    net.load_state_dict(best_state)
    _, scores = evaluate(net, X_val, y_val)
    return LCResult(net, stop, epoch + 1, history, scores)

"""Desk-scale experiments on synthetic scenes.

Three studies back the end-to-end claims:

* :func:`sr_gain` trains the multi-view network and compares it with a
  bicubic upsampling of the anchor view;
* :func:`misr_advantage` pits the multi-view network against its
  single-view ablation under identical budgets and seeds;
* :func:`downstream_ordering` trains the land-cover harness on HR images,
  SR outputs and bicubic upsamplings and compares their macro mIoU.

All numbers are held-out: SR quality is measured on stacks never used for
training, land cover on scenes disjoint from both SR and LC training.
Run ``python -m sen4x.experiments`` to print every study as JSON.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch

from .datapipe import impute_masked
from .estimators import upsample_anchor
from .landcover import SegConfig, predict_logits, train_lc
from .metrics import confusion, seg_scores
from .model import ModelConfig, Sen4xNet, build_network
from .synth import SynthConfig, synth_sample
from .train import TrainConfig, fit_network, mean_psnr, predict_batches


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    n_train: int = 200
    n_val: int = 40
    hr_size: int = 64
    data_seed: int = 0
    # tiny network
    embed_dim: int = 32
    n_rstb: int = 2
    rstb_depth: int = 2
    heads: int = 2
    window: int = 4
    # SR budget
    steps: int = 400
    batches_per_epoch: int = 4
    batch_size: int = 32
    lr0: float = 2e-3  # 3e-3 diverges at this size
    # land cover
    n_lc_train: int = 160
    n_lc_val: int = 40
    n_lc_test: int = 80
    lc_max_epochs: int = 60
    lc_patience: int = 10
    lc_lr0: float = 1e-3

    def model_config(self, mode="hybrid_early") -> ModelConfig:
        return ModelConfig(mode=mode, embed_dim=self.embed_dim, n_rstb=self.n_rstb, rstb_depth=self.rstb_depth,
                           heads=self.heads, window=self.window)

    def train_config(self, seed=0) -> TrainConfig:
        if self.steps % self.batches_per_epoch:
            raise ValueError("steps must be a multiple of batches_per_epoch")
        return TrainConfig(lr0=self.lr0, epochs=self.steps // self.batches_per_epoch,
                           batches_per_epoch=self.batches_per_epoch, batch_size=self.batch_size, seed=seed)

    def seg_config(self, seed=0) -> SegConfig:
        return SegConfig(max_epochs=self.lc_max_epochs, patience=self.lc_patience, lr0=self.lc_lr0, seed=seed)


@lru_cache(maxsize=4)
def synth_arrays(start: int, count: int, hr_size: int, seed: int):
    """Imputed LR stacks, HR images and label rasters for scenes ``start .. start+count-1``."""
    cfg = SynthConfig(hr_size=hr_size, seed=seed)
    X, Y, L = [], [], []
    for i in range(start, start + count):
        deg, image, labels = synth_sample(i, cfg)
        views, _ = impute_masked(deg.views, deg.masks)
        X.append(views)
        Y.append(image)
        L.append(labels)
    return np.stack(X), np.stack(Y), np.stack(L)


def sr_data(cfg: ExperimentConfig):
    X, Y, _ = synth_arrays(0, cfg.n_train + cfg.n_val, cfg.hr_size, cfg.data_seed)
    n = cfg.n_train
    return X[:n], Y[:n], X[n:], Y[n:]


def lc_data(cfg: ExperimentConfig):
    """Scenes for the land-cover study, disjoint from the SR scenes."""
    start = cfg.n_train + cfg.n_val
    total = cfg.n_lc_train + cfg.n_lc_val + cfg.n_lc_test
    X, Y, L = synth_arrays(start, total, cfg.hr_size, cfg.data_seed)
    a, b = cfg.n_lc_train, cfg.n_lc_train + cfg.n_lc_val
    return {name: (X[s], Y[s], L[s]) for name, s in
            (("train", slice(0, a)), ("val", slice(a, b)), ("test", slice(b, total)))}


@dataclass
class SRRun:
    mode: str
    seed: int
    psnr: float
    bicubic_psnr: float
    net: Sen4xNet
    seconds: float

    def summary(self):
        return {"mode": self.mode, "seed": self.seed, "psnr": self.psnr, "bicubic_psnr": self.bicubic_psnr,
                "gain_db": self.psnr - self.bicubic_psnr, "seconds": round(self.seconds, 1)}


def _views(net, X):
    return X[:, :1] if net.cfg.mode == "sisr_only" else X


def train_sr_run(cfg: ExperimentConfig, mode="hybrid_early", seed=0) -> SRRun:
    """Train one network for ``cfg.steps`` updates; score the final weights on held-out stacks."""
    X, Y, Xv, Yv = sr_data(cfg)
    t0 = time.perf_counter()
    net = build_network(cfg.model_config(mode), seed=seed)
    fit_network(net, X, Y, cfg.train_config(seed))
    pred = predict_batches(net, _views(net, Xv))
    return SRRun(mode, seed, mean_psnr(pred, Yv), mean_psnr(upsample_anchor(Xv), Yv), net,
                 time.perf_counter() - t0)


def sr_gain(cfg: ExperimentConfig = ExperimentConfig(), seed=0):
    run = train_sr_run(cfg, "hybrid_early", seed)
    return run, run.summary()


def misr_advantage(cfg: ExperimentConfig = ExperimentConfig(), seeds=(0, 1, 2), cached=None):
    """Mean held-out PSNR of hybrid_early minus sisr_only over ``seeds``.

    ``cached`` may hold already-trained :class:`SRRun` objects keyed by
    ``(mode, seed)``.
    """
    cached = dict(cached or {})
    rows = []
    for seed in seeds:
        for mode in ("hybrid_early", "sisr_only"):
            if (mode, seed) not in cached:
                cached[mode, seed] = train_sr_run(cfg, mode, seed)
        rows.append({"seed": seed, "hybrid_early": cached["hybrid_early", seed].psnr,
                     "sisr_only": cached["sisr_only", seed].psnr})
    hyb = float(np.mean([r["hybrid_early"] for r in rows]))
    sis = float(np.mean([r["sisr_only"] for r in rows]))
    return cached, {"per_seed": rows, "hybrid_early_mean": hyb, "sisr_only_mean": sis, "advantage_db": hyb - sis}


def lc_inputs(source, X, Y, sr_net=None):
    if source == "hr":
        return Y
    if source == "bicubic":
        return np.clip(upsample_anchor(X), 0, 1)
    if source == "sr":
        return np.clip(predict_batches(sr_net, _views(sr_net, X)), 0, 1)
    raise ValueError(f"unknown source {source!r}")


def train_lc_run(cfg: ExperimentConfig, source, sr_net=None, seed=0):
    """Train the segmenter on one image source; return test-set scores and the network."""
    data = lc_data(cfg)
    inputs = {k: lc_inputs(source, X, Y, sr_net) for k, (X, Y, _) in data.items()}
    res = train_lc(inputs["train"], data["train"][2], inputs["val"], data["val"][2], cfg.seg_config(seed))
    pred = predict_logits(res.net, inputs["test"]).argmax(dim=1).numpy().astype(np.uint8)
    scores = seg_scores(confusion(pred, data["test"][2]))
    return res, scores


def downstream_ordering(cfg: ExperimentConfig = ExperimentConfig(), sr_net=None, seed=0):
    """Macro mIoU of segmenters trained on HR, SR and bicubic inputs."""
    if sr_net is None:
        sr_net = train_sr_run(cfg, "hybrid_early", seed).net
    out, nets = {}, {}
    for source in ("hr", "sr", "bicubic"):
        res, scores = train_lc_run(cfg, source, sr_net, seed)
        nets[source] = res
        out[source] = {"miou_macro": scores.macro_miou, "miou_micro": scores.micro_miou, "acc": scores.overall_acc,
                       "epochs": res.epochs_run}
    out["sr_minus_bicubic"] = out["sr"]["miou_macro"] - out["bicubic"]["miou_macro"]
    return nets, out


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over every tensor's bytes, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def main():
    torch.set_num_threads(1)
    cfg = ExperimentConfig()
    report = {"config": asdict(cfg)}
    run, report["sr_gain"] = sr_gain(cfg)
    cached, report["misr_advantage"] = misr_advantage(cfg, cached={("hybrid_early", 0): run})
    _, report["downstream"] = downstream_ordering(cfg, sr_net=run.net)
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()

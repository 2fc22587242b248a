"""scikit-learn style wrappers around the SR network and the segmentation harness."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import check_batch, check_labels
from .landcover import SegConfig, SegNet, predict_logits, train_lc
from .metrics import N_CLASSES, confusion, psnr, seg_scores
from .model import ModelConfig, Sen4xNet, build_network
from .train import TrainConfig, fit_network, predict_batches


class SuperResolver(RegressorMixin, BaseEstimator):
    """Multi-view 4x super-resolution estimator.

    ``X`` is ``S x N x C x h x w`` (views best first), ``y`` is
    ``S x C x (scale*h) x (scale*w)``. ``predict`` returns SR images and
    ``score`` the mean PSNR in dB.
    """

    def __init__(self, mode="hybrid_early", n_views=8, embed_dim=258, n_rstb=6, heads=6, window=8,
                 rstb_depth=6, mlp_ratio=2.0, scale=4, anchor=True, lr0=1e-4, lr_min=0.0, epochs=100,
                 batches_per_epoch=4, batch_size=8, warmup_frac=0.05, loss="L1", seed=0, val_every=1):
        self.mode = mode
        self.n_views = n_views
        self.embed_dim = embed_dim
        self.n_rstb = n_rstb
        self.heads = heads
        self.window = window
        self.rstb_depth = rstb_depth
        self.mlp_ratio = mlp_ratio
        self.scale = scale
        self.anchor = anchor
        self.lr0 = lr0
        self.lr_min = lr_min
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_size = batch_size
        self.warmup_frac = warmup_frac
        self.loss = loss
        self.seed = seed
        self.val_every = val_every

    def model_config(self) -> ModelConfig:
        return ModelConfig(mode=self.mode, n_views=self.n_views, embed_dim=self.embed_dim, n_rstb=self.n_rstb,
                           heads=self.heads, window=self.window, rstb_depth=self.rstb_depth,
                           mlp_ratio=self.mlp_ratio, scale=self.scale, anchor=self.anchor)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, lr_min=self.lr_min, epochs=self.epochs,
                           batches_per_epoch=self.batches_per_epoch, batch_size=self.batch_size,
                           warmup_frac=self.warmup_frac, loss=self.loss, seed=self.seed, val_every=self.val_every)

    def _check_X(self, X, cfg):
        X = check_batch(X, 5)
        if X.shape[2] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} bands, got {X.shape[2]}")
        if cfg.mode != "sisr_only" and X.shape[1] != cfg.n_views:
            raise ValueError(f"expected {cfg.n_views} views, got {X.shape[1]}")
        h, w = X.shape[-2:]
        if cfg.mode != "misr_only" and (h % cfg.window or w % cfg.window):
            raise ValueError(f"patch {h}x{w} not divisible by window {cfg.window}")
        return X

    def fit(self, X, y, X_val=None, y_val=None, out_dir=None):
        cfg = self.model_config()
        tcfg = self.train_config()
        X = self._check_X(X, cfg)
        y = check_batch(y, 4, "y")
        expected = (len(X), X.shape[2], cfg.scale * X.shape[3], cfg.scale * X.shape[4])
        if y.shape != expected:
            raise ValueError(f"targets have shape {y.shape}, expected {expected}")
        if X_val is not None:
            X_val = self._check_X(X_val, cfg)
            y_val = check_batch(y_val, 4, "y_val")
        self.network_ = build_network(cfg, seed=self.seed)
        result = fit_network(self.network_, X, y, tcfg, X_val, y_val, out_dir=out_dir)
        self.log_ = result.log
        self.best_state_ = result.best_state
        self.best_val_psnr_ = result.best_val_psnr
        self.n_steps_ = result.step
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        cfg = self.network_.cfg
        X = self._check_X(X, cfg)
        if cfg.mode == "sisr_only":
            X = X[:, :1]
        return predict_batches(self.network_, X)

    def score(self, X, y, sample_weight=None):
        pred = np.clip(self.predict(X), 0.0, 1.0)
        y = check_batch(y, 4, "y")
        return float(np.average([psnr(p, t) for p, t in zip(pred, y)], weights=sample_weight))

    def save(self, path):
        check_is_fitted(self, "network_")
        checkpoint.save(path, "sr", self.network_.cfg.to_dict(), self.network_, step=self.n_steps_,
                        seed=self.seed, extra={"train": self.train_config().to_dict()})

    @classmethod
    def load(cls, path):
        header, tensors = checkpoint.load(path)
        cfg = ModelConfig.from_dict(header["config"])
        est = cls(**cfg.to_dict(), **header.get("extra", {}).get("train", {}))
        est.network_ = Sen4xNet(cfg)
        checkpoint.load_module_state(est.network_, tensors)
        est.n_steps_ = header["step"]
        return est


def upsample_anchor(X, scale=4, mode="bicubic"):
    """Learning-free baseline: interpolate the best view of each stack."""
    X = check_batch(X, 5)
    out = F.interpolate(torch.from_numpy(X[:, 0]), scale_factor=scale, mode=mode, align_corners=False)
    return out.numpy()


class LandCoverSegmenter(ClassifierMixin, BaseEstimator):
    """Pixel-wise land-cover classifier over ``S x 4 x H x W`` images.

    ``y`` holds ``S x H x W`` class codes with 255 marking unlabeled
    pixels; ``score`` returns macro mIoU.
    """

    def __init__(self, n_classes=N_CLASSES, stem=16, widths=(32, 64, 128, 256), fpn_dim=64, batch_size=16,
                 max_epochs=1000, patience=25, lr0=1e-4, lr_min=1e-8, seed=0):
        self.n_classes = n_classes
        self.stem = stem
        self.widths = widths
        self.fpn_dim = fpn_dim
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.lr0 = lr0
        self.lr_min = lr_min
        self.seed = seed

    def seg_config(self, in_channels=4) -> SegConfig:
        return SegConfig(n_classes=self.n_classes, in_channels=in_channels, stem=self.stem,
                         widths=tuple(self.widths), fpn_dim=self.fpn_dim, batch_size=self.batch_size,
                         max_epochs=self.max_epochs, patience=self.patience, lr0=self.lr0,
                         lr_min=self.lr_min, seed=self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_batch(X, 4)
        y = check_labels(y, self.n_classes)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise ValueError(f"labels {y.shape} do not match images {X.shape}")
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = check_batch(X_val, 4)
            y_val = check_labels(y_val, self.n_classes)
        res = train_lc(X, y, X_val, y_val, self.seg_config(X.shape[1]))
        self.network_ = res.net
        self.early_stop_ = res.stop
        self.n_epochs_ = res.epochs_run
        self.val_history_ = res.history
        self.val_scores_ = res.val_scores
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, check_batch(X, 4)).softmax(dim=1).numpy()

    def predict(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, check_batch(X, 4)).argmax(dim=1).numpy().astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        return seg_scores(confusion(self.predict(X), check_labels(y, self.n_classes), self.n_classes)).macro_miou

    def save(self, path):
        check_is_fitted(self, "network_")
        checkpoint.save(path, "landcover", self.network_.cfg.to_dict(), self.network_, step=self.n_epochs_,
                        seed=self.seed)

    @classmethod
    def load(cls, path):
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "landcover":
            raise checkpoint.CheckpointError(f"{path} is not a land-cover checkpoint")
        cfg = SegConfig.from_dict(header["config"])
        est = cls(n_classes=cfg.n_classes, stem=cfg.stem, widths=cfg.widths, fpn_dim=cfg.fpn_dim,
                  batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience,
                  lr0=cfg.lr0, lr_min=cfg.lr_min, seed=cfg.seed)
        est.network_ = SegNet(cfg)
        checkpoint.load_module_state(est.network_, tensors)
        est.classes_ = np.arange(cfg.n_classes)
        est.n_epochs_ = header["step"]
        return est

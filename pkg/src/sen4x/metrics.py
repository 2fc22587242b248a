"""Image-quality and land-cover segmentation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

N_CLASSES = 7
IGNORE = 255
CLASS_NAMES = ("buildings", "sealed", "water", "forest", "grassland", "cropland", "bare_soil")


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_band(a, b, window, c1, c2):
    def filt(x):
        return convolve2d(x, window[::-1, ::-1], mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    2-D inputs are a single band; 3-D inputs are ``C x H x W`` and the
    per-band scores are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError("expected H x W or C x H x W input")
    if a.shape[1] < win_size or a.shape[2] < win_size:
        raise ValueError(f"image {a.shape[1:]} smaller than the {win_size}x{win_size} window")
    window = gaussian_window(win_size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    return float(np.mean([_ssim_band(x, y, window, c1, c2) for x, y in zip(a, b)]))


@dataclass
class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))
    ignored: int = 0

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion(pred, gt, n_classes: int = N_CLASSES, ignore: int = IGNORE) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= n_classes):
        raise ValueError("ground-truth class code out of range")
    if p.size and (p.min() < 0 or p.max() >= n_classes):
        raise ValueError("predicted class code out of range")
    counts = np.bincount(g * n_classes + p, minlength=n_classes**2).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts.astype(np.int64), int((~valid).sum()))


@dataclass
class SegScores:
    overall_acc: float
    macro_miou: float
    micro_miou: float
    per_class_iou: list
    per_class_recall: list  # None where the class is absent from ground truth


def seg_scores(cm: ConfusionMatrix) -> SegScores:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("confusion matrix has no counted pixels")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    # absent classes (empty union) keep IoU 0 and stay in the K-term mean
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    rows = counts.sum(axis=1)
    recall = [float(t / r) if r > 0 else None for t, r in zip(tp, rows)]
    return SegScores(
        overall_acc=float(tp.sum() / total),
        macro_miou=float(iou.mean()),
        micro_miou=float(tp.sum() / union.sum()),
        per_class_iou=[float(v) for v in iou],
        per_class_recall=recall,
    )


def _json_number(x):
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def image_report(pred, ref) -> dict:
    return {"psnr_db": _json_number(psnr(pred, ref)), "ssim": _json_number(ssim(pred, ref))}


def seg_report(scores: SegScores) -> dict:
    return {
        "acc": scores.overall_acc,
        "miou_macro": scores.macro_miou,
        "miou_micro": scores.micro_miou,
        "recall": [_json_number(r) for r in scores.per_class_recall],
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sen4x.metrics import (
    ConfusionMatrix,
    confusion,
    dumps_report,
    image_report,
    psnr,
    seg_report,
    seg_scores,
    ssim,
)

from oracles import confusion_naive, psnr_naive, ssim_naive


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((4, 8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_psnr_matches_naive(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 9, 7)), rng.random((3, 9, 7))
    assert abs(psnr(a, b) - psnr_naive(a, b)) < 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def test_psnr_symmetric_and_monotone_in_noise():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16))
    levels = [0.01, 0.03, 0.1, 0.3]
    means = []
    for s in levels:
        vals = [psnr(img, img + np.random.default_rng(k).normal(0, s, img.shape)) for k in range(10)]
        means.append(np.mean(vals))
    assert all(x > y for x, y in zip(means, means[1:]))
    b = img + 0.05
    assert psnr(img, b) == psnr(b, img)


def test_ssim_identical_is_one():
    a = np.random.default_rng(0).random((20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = 0.0, 1.0
    expected = (2 * mu_a * mu_b + c1) * (2 * 0 + c2) / ((mu_a**2 + mu_b**2 + c1) * (0 + 0 + c2))
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_sliding_window_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((14, 15))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_naive(a, b)) < 1e-5


def test_ssim_multiband_is_band_mean():
    rng = np.random.default_rng(3)
    a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(x, y) for x, y in zip(a, b)]))


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.random((13, 13)), rng.random((13, 13))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_shift_invariance_of_structure_term():
    # adding one constant to both images leaves variance and covariance alone,
    # so SSIM is unchanged only where the luminance term is already 1 (a == b)
    rng = np.random.default_rng(5)
    a = rng.random((12, 12)) * 0.5
    assert ssim(a, a) == pytest.approx(ssim(a + 0.3, a + 0.3), abs=1e-12)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert ssim(a, b) != pytest.approx(ssim(a + 0.3, b + 0.3), abs=1e-9)


def test_confusion_diagonal_when_perfect():
    gt = np.random.default_rng(0).integers(0, 7, (8, 8)).astype(np.uint8)
    cm = confusion(gt, gt)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert cm.ignored == 0


def test_confusion_all_ignored():
    gt = np.full((5, 6), 255, np.uint8)
    cm = confusion(np.zeros_like(gt), gt)
    assert cm.counts.sum() == 0 and cm.ignored == 30


@pytest.mark.parametrize("seed", range(5))
def test_confusion_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 7, (9, 11)).astype(np.uint8)
    gt[rng.random(gt.shape) < 0.2] = 255
    pred = rng.integers(0, 7, gt.shape).astype(np.uint8)
    cm = confusion(pred, gt)
    counts, ignored = confusion_naive(pred, gt, 7)
    np.testing.assert_array_equal(cm.counts, counts)
    assert cm.ignored == ignored
    assert cm.counts.sum() + cm.ignored == gt.size


def test_confusion_rejects_bad_codes():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2), np.uint8), np.full((2, 2), 9, np.uint8))


def test_confusion_merge_is_addition():
    rng = np.random.default_rng(2)
    g1, g2 = rng.integers(0, 7, (2, 5, 5)).astype(np.uint8)
    p1, p2 = rng.integers(0, 7, (2, 5, 5)).astype(np.uint8)
    merged = confusion(p1, g1) + confusion(p2, g2)
    both = confusion(np.concatenate([p1, p2]), np.concatenate([g1, g2]))
    np.testing.assert_array_equal(merged.counts, both.counts)


def test_scores_perfect():
    gt = np.arange(7, dtype=np.uint8).repeat(3).reshape(3, 7)
    s = seg_scores(confusion(gt, gt))
    assert (s.overall_acc, s.macro_miou, s.micro_miou) == (1.0, 1.0, 1.0)
    assert s.per_class_recall == [1.0] * 7


def test_scores_hand_built_two_class():
    cm = ConfusionMatrix(np.array([[3, 1], [2, 4]]), 0)
    s = seg_scores(cm)
    assert s.overall_acc == pytest.approx(0.7)
    assert s.per_class_iou == pytest.approx([0.5, 4 / 7])
    assert s.macro_miou == pytest.approx((0.5 + 4 / 7) / 2)
    assert round(s.macro_miou, 4) == 0.5357
    assert s.micro_miou == pytest.approx(7 / 13)


@given(st.floats(min_value=0.01, max_value=0.99), st.integers(min_value=0, max_value=6))
@settings(max_examples=50, deadline=None)
def test_majority_closed_forms(p, cls):
    # class `cls` covers a fraction p of pixels; the rest spread over other classes
    n = 10_000
    k = int(round(p * n))
    p = k / n
    gt = np.empty(n, np.uint8)
    gt[:k] = cls
    others = [c for c in range(7) if c != cls]
    gt[k:] = np.array(others, np.uint8)[np.arange(n - k) % 6]
    s = seg_scores(confusion(np.full(n, cls, np.uint8), gt))
    assert s.overall_acc == pytest.approx(p, abs=1e-12)
    assert s.macro_miou == pytest.approx(p / 7, abs=1e-12)
    assert s.micro_miou == pytest.approx(p / (2 - p), abs=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_micro_never_exceeds_accuracy(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 7, 50).astype(np.uint8)
    pred = np.where(rng.random(50) < 0.6, gt, rng.integers(0, 7, 50)).astype(np.uint8)
    s = seg_scores(confusion(pred, gt))
    assert s.micro_miou <= s.overall_acc + 1e-15
    if np.all(pred == gt):
        assert s.micro_miou == s.overall_acc


def test_ignored_pixels_never_matter():
    rng = np.random.default_rng(7)
    gt = rng.integers(0, 7, (10, 10)).astype(np.uint8)
    gt[:3] = 255
    pred = rng.integers(0, 7, gt.shape).astype(np.uint8)
    pred2 = pred.copy()
    pred2[:3] = rng.integers(0, 7, (3, 10))
    assert seg_scores(confusion(pred, gt)) == seg_scores(confusion(pred2, gt))


def test_zero_total_raises():
    with pytest.raises(ValueError):
        seg_scores(ConfusionMatrix(np.zeros((7, 7), np.int64), 4))


def test_reports_serialise_inf_as_string():
    a = np.random.default_rng(0).random((4, 16, 16)).astype(np.float32)
    rep = json.loads(dumps_report(image_report(a, a)))
    assert rep["psnr_db"] == "inf" and rep["ssim"] == pytest.approx(1.0)
    gt = np.zeros((4, 4), np.uint8)
    seg = seg_report(seg_scores(confusion(gt, gt)))
    assert set(seg) == {"acc", "miou_macro", "miou_micro", "recall"}
    assert len(seg["recall"]) == 7 and seg["recall"][1] is None

import math

import numpy as np
import pytest
import torch

from sen4x.estimators import LandCoverSegmenter
from sen4x.landcover import EarlyStopState, SegConfig, build_segnet, cosine_lr, masked_ce, train_lc

SMALL = dict(stem=4, widths=(8, 8, 8, 8), fpn_dim=8, batch_size=4)


def test_forward_shapes_and_divisibility():
    net = build_segnet(SegConfig(**SMALL))
    assert net(torch.rand(2, 4, 64, 32)).shape == (2, 7, 64, 32)
    with pytest.raises(ValueError):
        net(torch.rand(1, 4, 48, 48))


def test_encoder_emits_four_scales():
    net = build_segnet(SegConfig(**SMALL))
    _, _, feats = net.encode(torch.rand(1, 4, 64, 64))
    assert [f.shape[-1] for f in feats] == [16, 8, 4, 2]


def test_masked_ce_oracle_and_ignored_gradient():
    torch.manual_seed(0)
    logits = torch.randn(1, 7, 3, 3, requires_grad=True)
    labels = torch.tensor([[[0, 1, 255], [2, 255, 3], [4, 5, 6]]])
    loss = masked_ce(logits, labels)
    ref = []
    lp = torch.log_softmax(logits.detach(), dim=1)
    for i in range(3):
        for j in range(3):
            if labels[0, i, j] != 255:
                ref.append(-lp[0, labels[0, i, j], i, j].item())
    assert loss.item() == pytest.approx(np.mean(ref), rel=1e-6)
    loss.backward()
    assert torch.all(logits.grad[0, :, 0, 2] == 0) and torch.all(logits.grad[0, :, 1, 1] == 0)
    with pytest.raises(ValueError):
        masked_ce(logits, torch.full((1, 3, 3), 255))


def test_early_stop_constant_loss():
    st = EarlyStopState()
    stops = [st.update(e, 1.0, patience=3) for e in range(10)]
    assert stops.index(True) == 4  # epoch 0 sets the best; 4 flat epochs exceed patience 3
    assert st.best_epoch == 0


def test_early_stop_counter_resets():
    st = EarlyStopState()
    for e, v in enumerate([3.0, 2.9, 2.95, 2.0]):
        assert not st.update(e, v, patience=1)
    assert st.best_epoch == 3 and st.epochs_since_best == 0


def test_cosine_lr_endpoints():
    cfg = SegConfig(lr0=1e-3, lr_min=1e-6, max_epochs=10)
    assert cosine_lr(0, cfg) == pytest.approx(1e-3)
    assert cosine_lr(5, cfg) == pytest.approx(1e-6 + 0.5 * (1e-3 - 1e-6))
    assert cosine_lr(10, cfg) == pytest.approx(1e-6)


def stripes(n=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((n, 32, 32), np.uint8)
    y[:, :, 16:] = 3
    X = np.where(y[:, None] == 3, 0.8, 0.2) + rng.normal(0, 0.02, (n, 4, 32, 32))
    return X.astype(np.float32), y


def test_learns_separable_classes_and_respects_patience():
    X, y = stripes()
    res = train_lc(X, y, X, y, SegConfig(**SMALL, lr0=1e-2, max_epochs=40, patience=3))
    assert res.val_scores.overall_acc > 0.95
    assert res.stop.epochs_since_best <= 3 + 1
    assert res.epochs_run <= 40
    assert min(res.history) == res.stop.best_val


def test_training_is_deterministic():
    X, y = stripes(4)
    cfg = SegConfig(**SMALL, lr0=1e-3, max_epochs=3, patience=5, seed=2)
    a, b = train_lc(X, y, X, y, cfg), train_lc(X, y, X, y, cfg)
    assert a.history == b.history


def test_estimator_api(tmp_path):
    X, y = stripes(4)
    est = LandCoverSegmenter(stem=4, widths=(8, 8, 8, 8), fpn_dim=8, batch_size=4, lr0=1e-2, max_epochs=30, patience=5)
    assert est.get_params()["patience"] == 5
    est.fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (4, 7, 32, 32) and np.allclose(proba.sum(axis=1), 1, atol=1e-5)
    assert est.predict(X).dtype == np.uint8
    assert 0 <= est.score(X, y) <= 1
    est.save(tmp_path / "lc.ckpt")
    again = LandCoverSegmenter.load(tmp_path / "lc.ckpt")
    np.testing.assert_array_equal(again.predict(X), est.predict(X))
    with pytest.raises(ValueError):
        est.fit(X, np.full((4, 32, 32), 9, np.uint8))

import json
import math

import numpy as np
import pytest
import torch

from sen4x import checkpoint
from sen4x.model import ModelConfig, build_network
from sen4x.train import (
    NumericError,
    TrainConfig,
    batch_indices,
    fit_network,
    grad_check,
    load_network,
    lr_at,
    relative_error,
    sr_loss,
    warmup_steps,
)

TINY = ModelConfig(embed_dim=8, n_rstb=1, rstb_depth=2, heads=2, window=4, n_views=4)


def data(n=6, h=8, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 4, 4, h, h)).astype(np.float32)
    y = rng.random((n, 4, 4 * h, 4 * h)).astype(np.float32)
    return X, y


# schedule

def test_lr_closed_forms():
    cfg = TrainConfig(lr0=1e-4, lr_min=1e-6, epochs=100, batches_per_epoch=4, warmup_frac=0.05)
    T = 400
    W = 20
    assert warmup_steps(T, 0.05) == W
    assert lr_at(0, T, cfg) == 1e-4 * 1 / W
    assert lr_at(W - 1, T, cfg) == 1e-4
    assert lr_at(W, T, cfg) == 1e-6 + 0.5 * (1e-4 - 1e-6) * 2.0
    mid = W + (T - W) // 2
    assert lr_at(mid, T, cfg) == 1e-6 + 0.5 * (1e-4 - 1e-6) * (1 + math.cos(math.pi * 0.5))
    assert lr_at(T, T, cfg) == 1e-6
    assert lr_at(T - 1, T, cfg) > 1e-6


def test_lr_errors_and_monotone_decay():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_at(0, 0, cfg)
    lrs = [lr_at(t, 400, cfg) for t in range(400)]
    w = warmup_steps(400, cfg.warmup_frac)
    assert all(a < b for a, b in zip(lrs[:w], lrs[1:w]))
    assert all(a >= b for a, b in zip(lrs[w - 1 :], lrs[w:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-5, lr_min=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batches_per_epoch=1)
    with pytest.raises(ValueError):
        TrainConfig(loss="L3")


# loss

def test_sr_loss_matches_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 3, 5, 5)), rng.random((2, 3, 5, 5))
    ta, tb = torch.from_numpy(a), torch.from_numpy(b)
    assert sr_loss(ta, tb, "L1").item() == pytest.approx(np.abs(a - b).sum() / a.size)
    assert sr_loss(ta, tb, "L2").item() == pytest.approx(((a - b) ** 2).sum() / a.size)
    with pytest.raises(ValueError):
        sr_loss(ta, tb[:1])


# batches

def test_batch_indices_are_epoch_permutations():
    cfg = TrainConfig(batches_per_epoch=3, batch_size=2, seed=4)
    epoch0 = np.concatenate([batch_indices(6, s, cfg) for s in range(3)])
    assert sorted(epoch0) == list(range(6))
    epoch1 = np.concatenate([batch_indices(6, s, cfg) for s in range(3, 6)])
    assert not np.array_equal(epoch0, epoch1)
    assert np.array_equal(batch_indices(6, 4, cfg), batch_indices(6, 4, cfg))


# fitting

def test_overfits_a_single_sample():
    X, y = data(1)
    net = build_network(TINY, seed=0)
    cfg = TrainConfig(lr0=3e-3, epochs=150, batches_per_epoch=1, batch_size=1)
    res = fit_network(net, X, y, cfg)
    losses = [s["loss"] for s in res.log.steps]
    assert losses[-1] < 0.5 * losses[0]


def test_logged_lr_matches_schedule_and_steps_increase(tmp_path):
    X, y = data()
    cfg = TrainConfig(lr0=1e-3, epochs=3, batches_per_epoch=2, batch_size=2)
    res = fit_network(build_network(TINY), X, y, cfg, X[:2], y[:2], out_dir=tmp_path)
    steps = [s["step"] for s in res.log.steps]
    assert steps == list(range(6))
    assert all(s["lr"] == lr_at(s["step"], 6, cfg) for s in res.log.steps)
    lines = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert sum(1 for r in lines if r["kind"] == "epoch") == 3
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    net, header = load_network(tmp_path / "last.ckpt")
    assert header["step"] == 6


def test_fixed_seed_is_bit_identical():
    X, y = data()
    cfg = TrainConfig(lr0=1e-3, epochs=2, batches_per_epoch=2, batch_size=2, seed=7)
    a = build_network(TINY, seed=7)
    b = build_network(TINY, seed=7)
    ra = fit_network(a, X, y, cfg)
    rb = fit_network(b, X, y, cfg)
    assert [s["loss"] for s in ra.log.steps] == [s["loss"] for s in rb.log.steps]
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


def test_resume_five_plus_five_equals_ten(tmp_path):
    X, y = data()
    cfg = TrainConfig(lr0=1e-3, epochs=5, batches_per_epoch=2, batch_size=3, seed=1)
    full = build_network(TINY, seed=1)
    fit_network(full, X, y, cfg)

    first = build_network(TINY, seed=1)
    fit_network(first, X, y, cfg, stop_step=5, out_dir=tmp_path)
    header, tensors = checkpoint.load(tmp_path / "last.ckpt")
    assert header["step"] == 5
    resumed, _ = load_network(tmp_path / "last.ckpt")
    fit_network(resumed, X, y, cfg, start_step=5, optimizer_tensors=tensors)
    for (n, p), q in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(p, q), n


def test_adam_leaves_zero_gradient_parameters_alone():
    # a sisr_only net never touches the fusion block; verify Adam with zero grads does not move weights
    p = torch.nn.Parameter(torch.ones(3))
    opt = torch.optim.Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    p.grad = torch.zeros(3)
    opt.step()
    assert torch.equal(p.detach(), torch.ones(3))


def test_non_finite_loss_aborts_with_step():
    X, y = data()
    y[0, 0, 0, 0] = np.nan
    cfg = TrainConfig(epochs=3, batches_per_epoch=2, batch_size=6)
    with pytest.raises(NumericError) as info:
        fit_network(build_network(TINY), X, y, cfg)
    assert info.value.step == 0


# gradient checking

def test_grad_check_linear_model_is_exact():
    lin = torch.nn.Linear(5, 3)
    rep = grad_check(lin, n_samples=10, eps=1e-3, inputs=torch.randn(4, 5))
    assert max(r["rel_error"] for r in rep) < 1e-8


def test_grad_check_tiny_network():
    cfg = ModelConfig(embed_dim=16, n_rstb=1, rstb_depth=2, heads=2, window=4, n_views=4)
    rep = grad_check(cfg, n_samples=20, eps=1e-6)
    assert sum(r["rel_error"] < 1e-2 for r in rep) >= 19


def test_grad_check_rejects_bad_eps_and_relative_error_floor():
    with pytest.raises(ValueError):
        grad_check(torch.nn.Linear(2, 2), eps=0, inputs=torch.zeros(1, 2))
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.01) == pytest.approx(0.01 / 1.01)

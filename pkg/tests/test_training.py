import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from shearnet.model import ModelConfig, init_params
from shearnet.training import (
    NumericalError,
    TrainConfig,
    TrainHistory,
    cosine_lr,
    gradcheck,
    iou_loss,
    joint_loss,
    modulus_loss,
    train,
)


def _jaccard_loss_by_counting(p, g, eps):
    inter = union = 0
    for a, b in zip(p.ravel(), g.ravel()):
        inter += a and b
        union += a or b
    return 1 - inter / (union + eps)


def test_iou_matches_set_counting_on_random_binary_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        h, w = rng.integers(4, 17, size=2)
        p = rng.random((h, w)) < rng.random()
        g = rng.random((h, w)) < rng.random()
        got = iou_loss(p.astype(float), g.astype(float), 1e-7).item()
        assert abs(got - _jaccard_loss_by_counting(p, g, 1e-7)) < 1e-12


def test_iou_examples():
    g = np.zeros((8, 8))
    g[2, 1:5] = 1
    p = np.zeros((8, 8))
    p[2, 3:7] = 1
    assert iou_loss(p, g).item() == pytest.approx(2 / 3, abs=1e-7)
    assert iou_loss(g, g).item() < 1e-6
    assert iou_loss(np.roll(g, 3, 0), g).item() == 1.0


def test_iou_batch_is_mean_of_images():
    rng = np.random.default_rng(1)
    p, g = rng.random((3, 6, 6)), (rng.random((3, 6, 6)) > 0.5).astype(float)
    per = [iou_loss(p[i], g[i]).item() for i in range(3)]
    assert iou_loss(p, g).item() == pytest.approx(np.mean(per), abs=1e-15)


def test_iou_rejects_out_of_range_predictions():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        iou_loss(np.full((4, 4), 1.5), np.ones((4, 4)))


@given(st.integers(0, 2 ** 31 - 1))
def test_iou_soft_range(seed):
    rng = np.random.default_rng(seed)
    v = iou_loss(rng.random((5, 7)), (rng.random((5, 7)) > 0.5).astype(float)).item()
    assert 0 <= v <= 1


def test_modulus_loss_examples():
    g = np.full((8, 8), 10.0)
    assert modulus_loss(g, g, "sum").item() == 0
    p = g.copy()
    p[3, 4] += 2
    assert modulus_loss(p, g, "sum").item() == 4.0


def test_modulus_loss_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p, g = rng.uniform(0, 100, (8, 8)), rng.uniform(0, 100, (8, 8))
    acc = 0.0
    for i in range(8):
        for j in range(8):
            acc += (g[i, j] - p[i, j]) ** 2
    assert modulus_loss(p, g, "sum").item() == pytest.approx(acc, rel=1e-12)
    assert modulus_loss(p, g, "mean").item() == pytest.approx(acc / 64, rel=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_modulus_sum_is_pixels_times_mean(seed):
    rng = np.random.default_rng(seed)
    p = torch.as_tensor(rng.uniform(0, 50, (2, 4, 8)))
    g = torch.as_tensor(rng.uniform(0, 50, (2, 4, 8)))
    assert modulus_loss(p, g, "sum").item() == pytest.approx(32 * modulus_loss(p, g, "mean").item(),
                                                             rel=1e-14)


def test_modulus_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        modulus_loss(np.ones((2, 2)), np.ones((2, 2)), "median")
    with pytest.raises(ValueError, match="non-finite"):
        modulus_loss(np.array([[np.nan]]), np.ones((1, 1)))


def test_joint_loss_examples():
    assert joint_loss(2.0, 0.4, 0.5) == pytest.approx(1.2)
    assert joint_loss(3.7, 0.2, 1.0) == 3.7
    assert joint_loss(3.7, 0.2, 0.0) == 0.2
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, 1.5)


@given(st.floats(0, 1e3), st.floats(0, 1), st.floats(0.01, 0.99), st.floats(0.01, 10))
def test_joint_loss_affine_and_monotone(lm, iou, alpha, d):
    j = joint_loss(lm, iou, alpha)
    assert j == alpha * lm + (1 - alpha) * iou
    assert joint_loss(lm + d, iou, alpha) > j
    assert joint_loss(lm, iou + d, alpha) > j


def test_cosine_lr_examples():
    assert cosine_lr(0, 120) == 5e-3
    assert cosine_lr(60, 120) == pytest.approx(2.5e-3, abs=1e-18)
    assert cosine_lr(120, 120) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ValueError):
        cosine_lr(121, 120)


@given(st.integers(1, 500))
def test_cosine_lr_is_non_increasing(total):
    lrs = [cosine_lr(e, total) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def _tiny(seed=0, f=4, frames=2, size=8, dtype=torch.float64):
    cfg = ModelConfig(f=f, t_d=frames)
    net = init_params(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    d = torch.as_tensor(rng.normal(0, 1, (2, frames, size, size)), dtype=dtype)
    g_mask = torch.zeros(2, size, size, dtype=dtype)
    g_mask[:, 2:5, 3:6] = 1
    g_mod = 10 + 30 * g_mask
    return net, d, g_mask, g_mod


def _joint(net, d, g_mask, g_mod, alpha=0.5):
    mask, mod = net(d)
    return joint_loss(modulus_loss(mod[:, 0], g_mod), iou_loss(mask[:, 0], g_mask), alpha)


def test_gradcheck_tiny_shearnet_double_precision():
    net, d, g_mask, g_mod = _tiny()
    params = list(net.parameters())
    err = gradcheck(lambda: _joint(net, d, g_mask, g_mod), params, n_probe=20, step=1e-4)
    assert err < 1e-4


def test_gradcheck_constant_loss_is_exact():
    p = [torch.zeros(5, dtype=torch.float64, requires_grad=True)]
    assert gradcheck(lambda: torch.tensor(3.0, dtype=torch.float64), p) == 0.0


def test_gradcheck_catches_corrupted_backward():
    net, d, g_mask, g_mod = _tiny()
    params = list(net.parameters())
    loss_fn = lambda: _joint(net, d, g_mask, g_mod)

    def bad_grads():
        grads = torch.autograd.grad(loss_fn(), params)
        return [0.5 * g + 1e-3 for g in grads]

    assert gradcheck(loss_fn, params, grad_fn=bad_grads) > 1e-2


def test_alpha_zero_gives_modulus_branch_no_gradient():
    net, d, g_mask, g_mod = _tiny()
    _joint(net, d, g_mask, g_mod, alpha=0.0).backward()
    me = [p.grad for p in net.me.parameters()]
    assert all(g is None or torch.count_nonzero(g) == 0 for g in me)
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in net.snet.parameters())


def _toy_arrays(n, seed, frames=3, size=8):
    """Moving blob data whose inclusion is visible in every frame."""
    rng = np.random.default_rng(seed)
    d = rng.normal(0, 0.05, (n, frames, size, size)).astype(np.float32)
    mask = np.zeros((n, size, size), np.float32)
    for i in range(n):
        r, c = rng.integers(1, size - 3, size=2)
        mask[i, r:r + 3, c:c + 3] = 1
        d[i] += mask[i] * np.linspace(0.5, 1, frames)[:, None, None]
    mod = (10 + 30 * mask).astype(np.float32)
    return d, mask, mod


TOY_MODEL = ModelConfig(f=4, t_d=3)


def test_training_is_deterministic_and_history_round_trips(tmp_path):
    tr, va = _toy_arrays(8, 0), _toy_arrays(4, 1)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=3)
    _, h1 = train(tr, va, TOY_MODEL, cfg, out_dir=tmp_path / "a")
    _, h2 = train(tr, va, TOY_MODEL, cfg, out_dir=tmp_path / "b")
    assert h1.to_csv() == h2.to_csv()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    back = TrainHistory.read_csv(tmp_path / "a" / "history.csv")
    assert back.records == h1.records
    for name in ("last", "best", "train_config.json"):
        assert (tmp_path / "a" / name).exists()


def test_resume_continues_schedule_and_matches_uninterrupted_run(tmp_path):
    tr, va = _toy_arrays(8, 0), _toy_arrays(4, 1)
    full_cfg = TrainConfig(epochs=4, batch_size=4, seed=5, checkpoint_every=2)
    _, full = train(tr, va, TOY_MODEL, full_cfg, out_dir=tmp_path / "full")
    _, resumed = train(tr, va, TOY_MODEL, full_cfg, out_dir=tmp_path / "res",
                       resume_from=tmp_path / "full" / "epoch_0002")
    assert [r["epoch"] for r in resumed.records] == [1, 2, 3, 4]
    assert resumed.records[2]["lr"] == cosine_lr(2, 4, full_cfg.lr0)
    for a, b in zip(full.records, resumed.records):
        assert a["train_loss"] == pytest.approx(b["train_loss"], rel=1e-5)


def test_training_reduces_loss_on_toy_data():
    tr, va = _toy_arrays(16, 0), _toy_arrays(4, 1)
    _, hist = train(tr, va, TOY_MODEL, TrainConfig(epochs=15, batch_size=4, seed=0))
    losses = hist.column("train_loss")
    assert losses[-1] < 0.5 * losses[0]


def test_non_finite_data_is_rejected():
    tr, va = _toy_arrays(4, 0), _toy_arrays(2, 1)
    tr[0][0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError, match="displacement"):
        train(tr, va, TOY_MODEL, TrainConfig(epochs=1, batch_size=4))


def test_diverged_parameters_raise_numerical_error():
    tr, va = _toy_arrays(4, 0), _toy_arrays(2, 1)
    net = init_params(TOY_MODEL)
    with torch.no_grad():
        net.snet.head.bias.fill_(float("nan"))
    with pytest.raises(NumericalError, match="epoch 1"):
        train(tr, va, TOY_MODEL, TrainConfig(epochs=1, batch_size=4), net=net)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(modulus_unit_kpa=0)
    cfg = TrainConfig(epochs=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert math.isclose(cfg.lr0, 5e-3)

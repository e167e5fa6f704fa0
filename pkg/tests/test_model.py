import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from shearnet.model import (
    ConvLSTMCell,
    ConvLSTMState,
    ModelConfig,
    SHEARNet,
    ShapeError,
    convlstm_step,
    init_params,
    load_checkpoint,
    me_forward,
    rb_forward,
    save_checkpoint,
    shearnet_forward,
    snet_forward,
)


def _zero_params(cin, ch, k=3):
    p = {}
    for g in "ifco":
        p["W_x" + g] = torch.zeros(ch, cin, k, k, dtype=torch.float64)
        p["W_h" + g] = torch.zeros(ch, ch, k, k, dtype=torch.float64)
        p["b_" + g] = torch.zeros(ch, dtype=torch.float64)
    return p


def _state(ch, val, size=5):
    z = torch.full((1, ch, size, size), float(val), dtype=torch.float64)
    return ConvLSTMState(torch.zeros_like(z), z)


def test_convlstm_zero_params_zero_cell():
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    out = convlstm_step(x, _state(3, 0.0), _zero_params(2, 3))
    assert torch.count_nonzero(out.cell) == 0 and torch.count_nonzero(out.hidden) == 0


def test_convlstm_zero_params_hand_values():
    c = 1.7
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    out = convlstm_step(x, _state(3, c), _zero_params(2, 3))
    assert torch.allclose(out.cell, torch.full_like(out.cell, 0.5 * c), atol=0, rtol=1e-15)
    assert torch.allclose(out.hidden, torch.full_like(out.hidden, 0.5 * math.tanh(0.5 * c)),
                          atol=0, rtol=1e-15)


def test_convlstm_strict_paper_uses_forget_gate():
    p = _zero_params(1, 1)
    p["b_f"] += 2.0
    p["b_o"] -= 2.0
    x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    st_ = _state(1, 1.0, 4)
    std = convlstm_step(x, st_, p)
    strict = convlstm_step(x, st_, p, strict_paper=True)
    c = torch.sigmoid(torch.tensor(2.0, dtype=torch.float64)) * 1.0
    assert torch.allclose(std.hidden, torch.sigmoid(torch.tensor(-2.0)).double() * torch.tanh(c))
    assert torch.allclose(strict.hidden, torch.sigmoid(torch.tensor(2.0)).double() * torch.tanh(c))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_convlstm_hidden_is_bounded(seed, scale):
    g = torch.Generator().manual_seed(seed)
    cell = ConvLSTMCell(2, 3).double()
    x = scale * torch.randn(1, 2, 6, 6, generator=g, dtype=torch.float64)
    out = cell(x, cell.init_state(x))
    out = cell(x, out)
    assert out.hidden.abs().max() < 1


def test_cell_matches_functional_step():
    torch.manual_seed(0)
    cell = ConvLSTMCell(2, 4).double()
    x = torch.randn(2, 2, 6, 5, dtype=torch.float64)
    st_ = ConvLSTMState(torch.randn(2, 4, 6, 5, dtype=torch.float64),
                        torch.randn(2, 4, 6, 5, dtype=torch.float64))
    a = cell(x, st_)
    b = convlstm_step(x, st_, cell.named_gate_params())
    assert torch.allclose(a.hidden, b.hidden, atol=1e-13)
    assert torch.allclose(a.cell, b.cell, atol=1e-13)


def test_convlstm_step_shape_errors():
    with pytest.raises(ShapeError):
        convlstm_step(torch.zeros(1, 3, 5, 5, dtype=torch.float64), _state(3, 0), _zero_params(2, 3))
    with pytest.raises(ShapeError):
        ConvLSTMState(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))


SHAPE_GRID = [(96, 48, 49), (48, 24, 16), (8, 8, 2), (16, 32, 3), (12, 20, 5), (64, 16, 7)]


@pytest.mark.parametrize("h,w,t", SHAPE_GRID)
def test_shape_contract(h, w, t):
    cfg = ModelConfig(f=4, t_d=t)
    net = init_params(cfg, seed=1)
    d = np.random.default_rng(0).normal(0, 1, (t, h, w)).astype(np.float32)
    res = shearnet_forward(d, net)
    assert res.mask.shape == (h, w, 1) and res.modulus.shape == (h, w, 1)
    assert res.mask.min() >= 0 and res.mask.max() <= 1
    assert rb_forward(d, net).shape == (h, w, 2 * cfg.f)
    assert snet_forward(d, net).shape == (h, w, 1)


def test_channel_counts():
    f = 16
    net = SHEARNet(ModelConfig(f=f))
    assert net.me.in_channels == 2 * f + 1
    for block in net.me.blocks:
        assert block.conv1.in_channels == 2 * f + 1
        assert block.conv2.in_channels == f + 2 * f + 1
    assert net.me.fuse.in_channels == 6 * f
    assert [b.conv1.dilation for b in net.me.blocks] == [(1, 1), (2, 2), (3, 3)]


def test_encoder_downsamples_by_m():
    cfg = ModelConfig(f=8, t_d=49)
    net = init_params(cfg)
    x = torch.zeros(1, 49, 1, 96, 48)
    assert net.snet.encode(x).shape == (1, 49, 8, 48, 24)


def test_rb_concatenation_order():
    cfg = ModelConfig(f=4, t_d=3)
    net = init_params(cfg, seed=2, dtype=torch.float64)
    d = torch.randn(1, 3, 1, 8, 8, dtype=torch.float64)
    seq1, s1 = net.rb.layer1(d)
    _, s2 = net.rb.layer2(seq1)
    out = net.rb(d)
    assert torch.equal(out[:, :4], s2.hidden) and torch.equal(out[:, 4:], s1.hidden)


def test_me_rejects_wrong_channels():
    net = init_params(ModelConfig(f=4, t_d=2))
    with pytest.raises(ShapeError, match="R_tau"):
        me_forward(np.zeros((8, 8, 7)), np.zeros((8, 8, 1)), net)
    assert me_forward(np.zeros((8, 8, 8)), np.zeros((8, 8, 1)), net).shape == (8, 8, 1)


def test_input_validation():
    net = init_params(ModelConfig(f=4, t_d=4))
    with pytest.raises(ShapeError, match="frames"):
        net(torch.zeros(1, 3, 8, 8))
    with pytest.raises(ShapeError, match="divisible"):
        net(torch.zeros(1, 4, 9, 8))
    with pytest.raises(ValueError):
        ModelConfig(m=3)
    with pytest.raises(ValueError):
        ModelConfig(t_d=1)


def test_frame_order_matters():
    net = init_params(ModelConfig(f=4, t_d=6), seed=3)
    d = np.random.default_rng(1).normal(0, 1, (6, 8, 8)).astype(np.float32)
    a = shearnet_forward(d, net)
    b = shearnet_forward(d[::-1].copy(), net)
    assert not np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.modulus, b.modulus)


def test_zero_parameters_give_constant_outputs():
    net = init_params(ModelConfig(f=4, t_d=3))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    rng = np.random.default_rng(0)
    outs = [shearnet_forward(rng.normal(0, 5, (3, 8, 8)).astype(np.float32), net) for _ in range(3)]
    for o in outs:
        assert np.all(o.mask == 0.5) and np.all(o.modulus == 0.0)
    assert np.count_nonzero(rb_forward(rng.normal(0, 1, (3, 8, 8)), net)) == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 1e3))
def test_mask_in_unit_interval_for_any_input(seed, scale):
    net = init_params(ModelConfig(f=2, t_d=2), seed=seed % 7)
    d = scale * np.random.default_rng(seed).normal(0, 1, (2, 4, 6))
    m = snet_forward(d, net)
    assert np.all((m >= 0) & (m <= 1))


def test_forward_is_deterministic():
    net = init_params(ModelConfig(f=4, t_d=5), seed=0)
    d = np.random.default_rng(0).normal(0, 1, (5, 16, 8)).astype(np.float32)
    a, b = shearnet_forward(d, net), shearnet_forward(d, net)
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.modulus, b.modulus)


def test_seeds_give_different_parameters():
    a = init_params(ModelConfig(f=4, t_d=2), seed=0)
    b = init_params(ModelConfig(f=4, t_d=2), seed=1)
    assert not torch.equal(a.snet.head.weight, b.snet.head.weight)
    cell = a.rb.layer1.cell
    hc = cell.hidden_channels
    assert torch.all(cell.conv_x.bias[hc:2 * hc] == 1)


def test_nonneg_modulus_activation():
    net = init_params(ModelConfig(f=4, t_d=2, modulus_activation="nonneg"), seed=0)
    d = np.random.default_rng(0).normal(0, 3, (2, 8, 8))
    assert shearnet_forward(d, net).modulus.min() >= 0


def test_detached_mask_blocks_modulus_gradient_into_snet():
    d = torch.randn(2, 2, 8, 8)
    grads = {}
    for detach in (False, True):
        net = init_params(ModelConfig(f=4, t_d=2, detach_mask_for_me=detach), seed=0)
        mask, mod = net(d)
        mod.sum().backward()
        grads[detach] = sum(float(p.grad.abs().sum()) for p in net.snet.parameters()
                            if p.grad is not None)
        assert all(p.grad is not None for p in net.me.parameters())
    assert grads[False] > 0 and grads[True] == 0
    # the forward values do not depend on the flag
    a = init_params(ModelConfig(f=4, t_d=2), seed=0)(d)
    b = init_params(ModelConfig(f=4, t_d=2, detach_mask_for_me=True), seed=0)(d)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(f=4, t_d=3, activation="elu")
    net = init_params(cfg, seed=5)
    save_checkpoint(net, tmp_path / "ck", extra={"epoch": 3})
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == cfg
    for (k, a), (_, b) in zip(net.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    d = np.random.default_rng(0).normal(0, 1, (3, 8, 8)).astype(np.float32)
    x, y = shearnet_forward(d, net), shearnet_forward(d, back)
    assert np.array_equal(x.modulus, y.modulus) and np.array_equal(x.mask, y.mask)


def test_checkpoint_errors(tmp_path):
    net = init_params(ModelConfig(f=4, t_d=3))
    save_checkpoint(net, tmp_path / "ck")
    with pytest.raises(ShapeError, match="shape"):
        load_checkpoint(tmp_path / "ck", ModelConfig(f=8, t_d=3))
    meta = tmp_path / "ck" / "model.json"
    meta.write_text(meta.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError, match="format version"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_paper_size_forward_under_one_second():
    net = init_params(ModelConfig(f=16, t_d=49), seed=0)
    d = np.random.default_rng(0).normal(0, 0.3, (49, 96, 48)).astype(np.float32)
    shearnet_forward(d, net)
    t0 = time.perf_counter()
    res = shearnet_forward(d, net)
    assert time.perf_counter() - t0 < 1.0
    assert res.runtime_s < 1.0

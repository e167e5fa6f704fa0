"""SHEAR-net: S-net mask localizer, recurrent block (RB) and modulus estimator (ME).

Tensors inside the network are batch-first and channels-first:
sequences are ``(N, T, C, H, W)`` and images ``(N, C, H, W)``. The numpy
helpers at the bottom of the module accept and return channels-last arrays
(``T x H x W`` input, ``H x W x 1`` outputs).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from shearnet import binio

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": torch.tanh,
    "elu": F.elu,
    "relu": F.relu,
}


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape a layer expects."""


@dataclass
class ModelConfig:
    f: int = 16
    m: int = 2
    t_d: int = 49
    snet_lstm_layers: int = 2
    rb_lstm_layers: int = 2
    dense_blocks: int = 3
    kernel_size: int = 3
    activation: str = "tanh"
    modulus_activation: str = "linear"
    # P = modulus_scale_kpa * (raw head output); keeps head outputs O(1).
    modulus_scale_kpa: float = 10.0
    strict_paper_lstm: bool = False
    # stop the modulus loss from reaching S-net through the mask input
    detach_mask_for_me: bool = False

    def __post_init__(self):
        if self.f < 1:
            raise ValueError(f"f must be >= 1, got {self.f}")
        if self.m < 1 or (self.m & (self.m - 1)) != 0:
            raise ValueError(f"m must be a power of two, got {self.m}")
        if self.t_d < 2:
            raise ValueError(f"t_d must be >= 2, got {self.t_d}")
        if self.dense_blocks < 1:
            raise ValueError("dense_blocks must be >= 1")
        if self.rb_lstm_layers != 2:
            raise ValueError("the recurrent block has exactly two ConvLSTM layers")
        if self.snet_lstm_layers < 0:
            raise ValueError("snet_lstm_layers must be >= 0")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd to preserve spatial size")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.modulus_activation not in ("linear", "nonneg"):
            raise ValueError(f"unknown modulus_activation {self.modulus_activation!r}")

    def check_input(self, height: int, width: int, frames: int):
        if frames != self.t_d:
            raise ShapeError(f"expected {self.t_d} frames, got {frames}")
        if height % self.m or width % self.m:
            raise ShapeError(
                f"spatial size {height}x{width} is not divisible by m={self.m}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# ConvLSTM
# --------------------------------------------------------------------------

@dataclass
class ConvLSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(
                f"hidden {tuple(self.hidden.shape)} and cell "
                f"{tuple(self.cell.shape)} shapes differ"
            )


def convlstm_step(x, state, params, strict_paper=False):
    """One ConvLSTM update.

    ``params`` maps ``W_x{i,f,c,o}``, ``W_h{i,f,c,o}`` and ``b_{i,f,c,o}`` to
    tensors; weights are ``(out, in, k, k)`` conv kernels and biases ``(out,)``.
    With ``strict_paper`` the hidden state is gated by the forget gate instead
    of the output gate.
    """
    h_prev, c_prev = state.hidden, state.cell
    if x.shape[0] != h_prev.shape[0] or x.shape[-2:] != h_prev.shape[-2:]:
        raise ShapeError(
            f"X_t {tuple(x.shape)} does not match state {tuple(h_prev.shape)}"
        )

    def gate(name):
        wx, wh = params["W_x" + name], params["W_h" + name]
        if wx.shape[1] != x.shape[1]:
            raise ShapeError(f"W_x{name} expects {wx.shape[1]} input channels, got {x.shape[1]}")
        if wh.shape[1] != h_prev.shape[1]:
            raise ShapeError(f"W_h{name} expects {wh.shape[1]} channels, got {h_prev.shape[1]}")
        pad = wx.shape[-1] // 2
        return (F.conv2d(x, wx, padding=pad)
                + F.conv2d(h_prev, wh, padding=pad)
                + params["b_" + name].view(1, -1, 1, 1))

    i = torch.sigmoid(gate("i"))
    f = torch.sigmoid(gate("f"))
    c = f * c_prev + i * torch.tanh(gate("c"))
    o = torch.sigmoid(gate("o"))
    h = (f if strict_paper else o) * torch.tanh(c)
    return ConvLSTMState(h, c)


class ConvLSTMCell(nn.Module):
    """ConvLSTM cell; the four gates share one input conv and one hidden conv."""

    GATES = ("i", "f", "c", "o")

    def __init__(self, in_channels, hidden_channels, kernel_size=3, strict_paper=False):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.strict_paper = strict_paper
        pad = kernel_size // 2
        self.conv_x = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size,
                                padding=pad, bias=False)

    def init_state(self, x):
        n, _, h, w = x.shape
        z = x.new_zeros(n, self.hidden_channels, h, w)
        return ConvLSTMState(z, z)

    def named_gate_params(self):
        """Gate-wise view of the weights in the naming used by :func:`convlstm_step`."""
        wx = self.conv_x.weight.chunk(4, 0)
        wh = self.conv_h.weight.chunk(4, 0)
        b = self.conv_x.bias.chunk(4, 0)
        out = {}
        for k, g in enumerate(self.GATES):
            out["W_x" + g], out["W_h" + g], out["b_" + g] = wx[k], wh[k], b[k]
        return out

    def forward(self, x, state):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"ConvLSTM expects {self.in_channels} channels, got {x.shape[1]}")
        gates = self.conv_x(x) + self.conv_h(state.hidden)
        gi, gf, gc, go = gates.chunk(4, 1)
        i, f, o = torch.sigmoid(gi), torch.sigmoid(gf), torch.sigmoid(go)
        c = f * state.cell + i * torch.tanh(gc)
        h = (f if self.strict_paper else o) * torch.tanh(c)
        return ConvLSTMState(h, c)


class ConvLSTM(nn.Module):
    """Runs a cell over a ``(N, T, C, H, W)`` sequence."""

    def __init__(self, in_channels, hidden_channels, kernel_size=3, strict_paper=False):
        super().__init__()
        self.cell = ConvLSTMCell(in_channels, hidden_channels, kernel_size, strict_paper)

    def forward(self, seq):
        state = self.cell.init_state(seq[:, 0])
        hidden = []
        for t in range(seq.shape[1]):
            state = self.cell(seq[:, t], state)
            hidden.append(state.hidden)
        return torch.stack(hidden, 1), state


# --------------------------------------------------------------------------
# sub-networks
# --------------------------------------------------------------------------

class SNet(nn.Module):
    """3-D conv encoder -> ConvLSTM stack -> collapsing ConvLSTM -> 2-D decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c, k = config, config.kernel_size
        self.act = _ACTIVATIONS[c.activation]
        n_down = int(math.log2(c.m))
        enc = []
        for s in range(max(n_down, 1)):
            stride = (1, 2, 2) if s < n_down else (1, 1, 1)
            enc.append(nn.Conv3d(1 if s == 0 else c.f, c.f, (3, k, k), stride=stride,
                                 padding=(1, k // 2, k // 2)))
        self.encoder = nn.ModuleList(enc)
        self.lstms = nn.ModuleList(
            ConvLSTM(c.f, c.f, k, c.strict_paper_lstm) for _ in range(c.snet_lstm_layers)
        )
        self.collapse = ConvLSTM(c.f, c.f, k, c.strict_paper_lstm)
        self.decoder = nn.ModuleList(
            nn.Conv2d(c.f, c.f, k, padding=k // 2) for _ in range(max(n_down, 1))
        )
        self.n_up = n_down
        self.head = nn.Conv2d(c.f, 1, k, padding=k // 2)

    def encode(self, d):
        # (N, T, 1, H, W) -> (N, T, f, H/m, W/m)
        x = d.transpose(1, 2)
        for conv in self.encoder:
            x = self.act(conv(x))
        return x.transpose(1, 2)

    def forward(self, d):
        x = self.encode(d)
        for lstm in self.lstms:
            x, _ = lstm(x)
        _, state = self.collapse(x)
        r = state.hidden
        for s, conv in enumerate(self.decoder):
            r = self.act(conv(r))
            if s < self.n_up:
                r = F.interpolate(r, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(r))


class RecurrentBlock(nn.Module):
    """Two full-resolution ConvLSTM layers; returns ``cat(R, H)`` with 2f channels."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.layer1 = ConvLSTM(1, c.f, c.kernel_size, c.strict_paper_lstm)
        self.layer2 = ConvLSTM(c.f, c.f, c.kernel_size, c.strict_paper_lstm)

    def forward(self, d):
        seq1, state1 = self.layer1(d)
        _, state2 = self.layer2(seq1)
        return torch.cat([state2.hidden, state1.hidden], 1)


class DenseBlock(nn.Module):
    def __init__(self, in_channels, f, kernel_size, dilation, act):
        super().__init__()
        pad = dilation * (kernel_size // 2)
        self.conv1 = nn.Conv2d(in_channels, f, kernel_size, padding=pad, dilation=dilation)
        self.conv2 = nn.Conv2d(in_channels + f, f, kernel_size, padding=pad, dilation=dilation)
        self.act = act

    def forward(self, o):
        e1 = self.act(self.conv1(o))
        e2 = self.act(self.conv2(torch.cat([e1, o], 1)))
        return e1, e2


class ModulusEstimator(nn.Module):
    """Dense blocks over ``cat(R_tau, M)``; block ``i`` uses dilation ``i``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c, k = config, config.kernel_size
        self.config = config
        self.act = _ACTIVATIONS[c.activation]
        self.in_channels = 2 * c.f + 1
        self.blocks = nn.ModuleList(
            DenseBlock(self.in_channels, c.f, k, i + 1, self.act) for i in range(c.dense_blocks)
        )
        self.fuse = nn.Conv2d(2 * c.f * c.dense_blocks, c.f, k, padding=k // 2)
        self.out = nn.Conv2d(c.f, 1, 1)

    def forward(self, r_tau, mask):
        if r_tau.shape[1] != 2 * self.config.f:
            raise ShapeError(f"R_tau must have {2 * self.config.f} channels, got {r_tau.shape[1]}")
        if mask.shape[1] != 1:
            raise ShapeError(f"mask must have 1 channel, got {mask.shape[1]}")
        if r_tau.shape[-2:] != mask.shape[-2:]:
            raise ShapeError("R_tau and mask spatial sizes differ")
        o = torch.cat([r_tau, mask], 1)
        feats = []
        for block in self.blocks:
            feats.extend(block(o))
        y = self.out(self.act(self.fuse(torch.cat(feats, 1))))
        y = self.config.modulus_scale_kpa * y
        if self.config.modulus_activation == "nonneg":
            y = F.softplus(y)
        return y


class SHEARNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.snet = SNet(config)
        self.rb = RecurrentBlock(config)
        self.me = ModulusEstimator(config)

    def forward(self, d):
        """``d``: ``(N, T, H, W)`` or ``(N, T, 1, H, W)`` normalized displacement.

        Returns ``(mask, modulus)``, both ``(N, 1, H, W)``; modulus in kPa.
        """
        if d.dim() == 4:
            d = d.unsqueeze(2)
        if d.dim() != 5 or d.shape[2] != 1:
            raise ShapeError(f"expected (N, T, 1, H, W) input, got {tuple(d.shape)}")
        self.config.check_input(d.shape[-2], d.shape[-1], d.shape[1])
        mask = self.snet(d)
        r_tau = self.rb(d)
        me_mask = mask.detach() if self.config.detach_mask_for_me else mask
        return mask, self.me(r_tau, me_mask)


# --------------------------------------------------------------------------
# parameters and checkpoints
# --------------------------------------------------------------------------

def init_params(config: ModelConfig, seed=0, dtype=torch.float32) -> SHEARNet:
    """Build a network with He-style fan-in scaled weights and zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    net = SHEARNet(config)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
        # forget-gate bias 1 keeps early cell memory alive
        for mod in net.modules():
            if isinstance(mod, ConvLSTMCell):
                hc = mod.hidden_channels
                mod.conv_x.bias[hc:2 * hc] = 1.0
    return net.to(dtype)


def save_checkpoint(net: SHEARNet, path, extra=None):
    """Write ``model.json`` plus one float32 array file per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, p in net.state_dict().items():
        arr = p.detach().cpu().numpy().astype(np.float32)
        binio.write_array(path / "params" / f"{name}.f32", arr)
        shapes[name] = list(arr.shape)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "params": shapes,
        "code_version": binio.code_version(),
    }
    if extra:
        meta["extra"] = extra
    binio.write_json(path / "model.json", meta)
    return path


def load_checkpoint(path, config: ModelConfig | None = None) -> SHEARNet:
    path = Path(path)
    meta_file = path / "model.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no model.json in checkpoint {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint {path} has format version {meta.get('format_version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    stored = ModelConfig.from_dict(meta["config"])
    config = config or stored
    net = SHEARNet(config)
    state = net.state_dict()
    if set(state) != set(meta["params"]):
        missing = sorted(set(state) ^ set(meta["params"]))
        raise ShapeError(f"checkpoint parameters do not match the model: {missing[:5]}")
    loaded = {}
    for name, tensor in state.items():
        shape = tuple(meta["params"][name])
        if shape != tuple(tensor.shape):
            raise ShapeError(
                f"parameter {name}: checkpoint shape {shape} != model shape {tuple(tensor.shape)}"
            )
        arr = binio.read_array(path / "params" / f"{name}.f32", shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} in {path} contains non-finite values")
        loaded[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(loaded)
    return net


# --------------------------------------------------------------------------
# numpy-facing forward helpers
# --------------------------------------------------------------------------

def _as_batch(d, dtype):
    d = np.asarray(d)
    if d.ndim == 3:
        d = d[None]
    if d.ndim != 4:
        raise ShapeError(f"expected T x H x W or N x T x H x W input, got shape {d.shape}")
    return torch.as_tensor(d, dtype=dtype)


def _dtype(net):
    return next(net.parameters()).dtype


@torch.no_grad()
def snet_forward(d, net: SHEARNet):
    """Mask probabilities ``H x W x 1`` for one ``T x H x W`` sequence."""
    x = _as_batch(d, _dtype(net)).unsqueeze(2)
    net.config.check_input(x.shape[-2], x.shape[-1], x.shape[1])
    return net.snet(x)[0].permute(1, 2, 0).numpy()


@torch.no_grad()
def rb_forward(d, net: SHEARNet):
    """``cat(R, H)`` as ``H x W x 2f``."""
    x = _as_batch(d, _dtype(net)).unsqueeze(2)
    net.config.check_input(x.shape[-2], x.shape[-1], x.shape[1])
    return net.rb(x)[0].permute(1, 2, 0).numpy()


@torch.no_grad()
def me_forward(r_tau, mask, net: SHEARNet):
    """Modulus image ``H x W x 1`` (kPa) from channels-last ``R_tau`` and mask."""
    dt = _dtype(net)
    r = torch.as_tensor(np.asarray(r_tau), dtype=dt).permute(2, 0, 1)[None]
    mk = torch.as_tensor(np.asarray(mask), dtype=dt).permute(2, 0, 1)[None]
    return net.me(r, mk)[0].permute(1, 2, 0).numpy()


@dataclass
class ForwardResult:
    mask: np.ndarray
    modulus: np.ndarray
    runtime_s: float = field(default=0.0)


@torch.no_grad()
def shearnet_forward(d, net: SHEARNet) -> ForwardResult:
    """Run both heads on one ``T x H x W`` sequence and time the call."""
    x = _as_batch(d, _dtype(net))
    net.eval()
    t0 = time.perf_counter()
    mask, modulus = net(x)
    elapsed = time.perf_counter() - t0
    return ForwardResult(
        mask[0].permute(1, 2, 0).numpy(),
        modulus[0].permute(1, 2, 0).numpy(),
        elapsed,
    )

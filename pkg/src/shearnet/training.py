"""Multi-task loss, cosine-annealed Adam training loop and gradient checking."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from shearnet import binio, metrics
from shearnet.model import ModelConfig, SHEARNet, init_params, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_dsc", "val_psnr", "lr")


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _per_image(x):
    # (H, W) -> (1, H*W); (N, ..., H, W) -> (N, rest)
    return x.reshape(1, -1) if x.dim() == 2 else x.reshape(x.shape[0], -1)


def iou_loss(pred, target, epsilon=1e-7):
    """Soft Jaccard loss ``1 - sum(PG) / (sum(P + G - PG) + eps)``, averaged over the batch.

    For binary ``pred`` this is the set-count Jaccard loss.
    """
    p, g = _tensor(pred), _tensor(target, pred)
    if p.shape != g.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} shapes differ")
    with torch.no_grad():
        if p.numel() and (p.min() < 0 or p.max() > 1):
            raise ValueError("mask predictions must lie in [0, 1]")
    p, g = _per_image(p), _per_image(g)
    inter = (p * g).sum(1)
    union = (p + g - p * g).sum(1)
    return (1 - inter / (union + epsilon)).mean()


def modulus_loss(pred, target, reduction="mean"):
    """Squared-error modulus loss per image (``sum`` or pixel ``mean``), batch-averaged."""
    p, g = _tensor(pred), _tensor(target, pred)
    if p.shape != g.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} shapes differ")
    if not (torch.isfinite(p).all() and torch.isfinite(g).all()):
        raise ValueError("modulus_loss received non-finite values")
    se = ((g - p) ** 2)
    se = _per_image(se)
    if reduction == "sum":
        per = se.sum(1)
    elif reduction == "mean":
        per = se.mean(1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return per.mean()


def joint_loss(l_m, iou, alpha=0.5):
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_m + (1 - alpha) * iou


def cosine_lr(epoch, total_epochs, lr0=5e-3):
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    alpha: float = 0.5
    lr0: float = 5e-3
    epochs: int = 120
    batch_size: int = 16
    iou_epsilon: float = 1e-7
    modulus_reduction: str = "mean"
    # L_m is evaluated on modulus / modulus_unit_kpa
    modulus_unit_kpa: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    init_modulus_bias: bool = True
    # starting the mask head at the inclusion fraction stalls IoU learning; off by default
    init_mask_prior: bool = False
    deterministic: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iou_epsilon <= 0:
            raise ValueError("iou_epsilon must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.modulus_unit_kpa <= 0:
            raise ValueError("modulus_unit_kpa must be positive")
        if self.modulus_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown modulus_reduction {self.modulus_reduction!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def append(self, **rec):
        self.records.append(rec)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path):
        hist = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                hist.append(epoch=int(row["epoch"]),
                            **{k: float(row[k]) for k in HISTORY_FIELDS[1:]})
        return hist


def _batch_loss(net, d, g_mask, g_mod, cfg: TrainConfig):
    mask, mod = net(d)
    if not (torch.isfinite(mask).all() and torch.isfinite(mod).all()):
        raise NumericalError("network produced non-finite outputs")
    unit = cfg.modulus_unit_kpa
    l_m = modulus_loss(mod[:, 0] / unit, g_mod / unit, cfg.modulus_reduction)
    iou = iou_loss(mask[:, 0], g_mask, cfg.iou_epsilon)
    return joint_loss(l_m, iou, cfg.alpha), mask, mod


@torch.no_grad()
def _validate(net, arrays, cfg: TrainConfig):
    d, g_mask, g_mod = arrays
    losses, dscs, psnrs = [], [], []
    net.eval()
    for s in range(0, len(d), cfg.batch_size):
        sl = slice(s, s + cfg.batch_size)
        loss, mask, mod = _batch_loss(net, d[sl], g_mask[sl], g_mod[sl], cfg)
        losses.append(loss.item() * len(d[sl]))
        pm = (mask[:, 0].numpy() >= 0.5).astype(np.float64)
        pmod = np.clip(mod[:, 0].numpy().astype(np.float64), 0, None)
        for k in range(len(pm)):
            dscs.append(metrics.dsc(pm[k], g_mask[sl][k].numpy()))
            psnrs.append(metrics.psnr(pmod[k], g_mod[sl][k].numpy().astype(np.float64)))
    net.train()
    return sum(losses) / len(d), float(np.mean(dscs)), float(np.mean(psnrs))


def _to_tensors(arrays, dtype):
    d, mask, mod = arrays
    if len(d) == 0:
        raise ValueError("empty split")
    for name, arr in (("displacement", d), ("mask", mask), ("modulus", mod)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} array contains non-finite values")
    return (torch.as_tensor(np.asarray(d), dtype=dtype),
            torch.as_tensor(np.asarray(mask), dtype=dtype),
            torch.as_tensor(np.asarray(mod), dtype=dtype))


def _save_state(net, opt, history, path, epoch):
    path = Path(path)
    save_checkpoint(net, path, extra={"epoch": epoch})
    torch.save(opt.state_dict(), path / "optimizer.pt")
    history.write_csv(path / "history.csv")


def initial_network(model_config: ModelConfig, config: TrainConfig, mask, modulus):
    """The network ``train`` starts from, before any optimizer step.

    ``mask`` and ``modulus`` are the training targets; they only feed the
    optional output-bias initializations.
    """
    torch.manual_seed(config.seed)
    net = init_params(model_config, seed=config.seed)
    if config.init_modulus_bias:
        with torch.no_grad():
            net.me.out.bias.fill_(float(np.mean(modulus)) / model_config.modulus_scale_kpa)
    if config.init_mask_prior:
        # start the mask head at the mean inclusion fraction instead of 0.5
        frac = float(np.clip(np.mean(mask), 0.01, 0.99))
        with torch.no_grad():
            net.snet.head.bias.fill_(math.log(frac / (1 - frac)))
    return net


def train(train_arrays, val_arrays, model_config: ModelConfig, config: TrainConfig,
          out_dir=None, resume_from=None, net=None, progress=None):
    """Train SHEAR-net on ``(disp, mask, modulus)`` arrays.

    ``disp`` is ``(N, T, H, W)`` normalized displacement, ``mask`` and
    ``modulus`` (kPa) are ``(N, H, W)``. With ``out_dir`` the history CSV is
    rewritten after every epoch and checkpoints go to ``out_dir/last``,
    ``out_dir/best`` (lowest validation loss) and every ``checkpoint_every``
    epochs to ``out_dir/epoch_XXXX``. Returns ``(net, history)``.
    """
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    dtype = torch.float32
    tr = _to_tensors(train_arrays, dtype)
    va = _to_tensors(val_arrays, dtype)
    rng = np.random.default_rng(config.seed)
    start_epoch = 0
    history = TrainHistory()

    if resume_from is not None:
        resume_from = Path(resume_from)
        net = load_checkpoint(resume_from)
        history = TrainHistory.read_csv(resume_from / "history.csv")
        start_epoch = len(history.records)
        # replay the shuffles of completed epochs so batches match an uninterrupted run
        for _ in range(start_epoch):
            rng.permutation(len(tr[0]))
    elif net is None:
        net = initial_network(model_config, config, train_arrays[1], train_arrays[2])
    net = net.to(dtype)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr0, betas=config.betas,
                           eps=config.adam_eps)
    if resume_from is not None and (resume_from / "optimizer.pt").exists():
        opt.load_state_dict(torch.load(resume_from / "optimizer.pt"))

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        binio.write_json(out_dir / "train_config.json",
                         {"train": config.to_dict(), "model": model_config.to_dict()})
    best = math.inf if not history.records else min(history.column("val_loss"))
    t_start = time.perf_counter()
    n = len(tr[0])
    for epoch in range(start_epoch, config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        for grp in opt.param_groups:
            grp["lr"] = lr
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[s:s + config.batch_size])
            where = f"; last good checkpoint: {out_dir / 'last'}" if out_dir else ""
            try:
                loss, _, _ = _batch_loss(net, tr[0][idx], tr[1][idx], tr[2][idx], config)
            except NumericalError as e:
                raise NumericalError(f"{e} at epoch {epoch + 1}{where}") from e
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}{where}")
            opt.zero_grad()
            loss.backward()
            if not all(torch.isfinite(p.grad).all() for p in net.parameters() if p.grad is not None):
                raise NumericalError(f"non-finite gradient at epoch {epoch + 1}{where}")
            opt.step()
            total += loss.item() * len(idx)
        val_loss, val_dsc, val_psnr = _validate(net, va, config)
        history.append(epoch=epoch + 1, train_loss=total / n, val_loss=val_loss,
                       val_dsc=val_dsc, val_psnr=val_psnr, lr=lr)
        if progress:
            progress(history.records[-1])
        logger.info("epoch %d train %.4f val %.4f dsc %.3f psnr %.2f lr %.2e",
                    epoch + 1, total / n, val_loss, val_dsc, val_psnr, lr)
        if out_dir:
            history.write_csv(out_dir / "history.csv")
            _save_state(net, opt, history, out_dir / "last", epoch + 1)
            if val_loss < best:
                best = val_loss
                if (out_dir / "best").exists():
                    shutil.rmtree(out_dir / "best")
                _save_state(net, opt, history, out_dir / "best", epoch + 1)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                _save_state(net, opt, history, out_dir / f"epoch_{epoch + 1:04d}", epoch + 1)
    history.wall_clock_s = time.perf_counter() - t_start
    net.eval()
    return net, history


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

def _scalar(x):
    return x.item() if isinstance(x, torch.Tensor) else float(x)


def gradcheck(loss_fn, params, n_probe=20, step=1e-4, seed=0, grad_fn=None, abs_floor=1e-8):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` evaluates a scalar from the current values of ``params``
    (a list of tensors). The analytic gradient comes from autograd unless
    ``grad_fn()`` is supplied (returning one gradient tensor per parameter).
    ``n_probe`` scalar entries are chosen uniformly at random across all
    parameters. The error of each entry is ``|numeric - analytic|`` divided by
    ``max(|numeric|, |analytic|, abs_floor)``; entries where both vanish count
    as exact.
    """
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    if grad_fn is None:
        loss = loss_fn()
        if isinstance(loss, torch.Tensor) and loss.requires_grad:
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        else:
            grads = [torch.zeros_like(p) for p in params]
    else:
        grads = grad_fn()
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_probe, offsets[-1]), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = view[j].item()
            view[j] = orig + step
            up = _scalar(loss_fn())
            view[j] = orig - step
            down = _scalar(loss_fn())
            view[j] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(grads[k].reshape(-1)[j])
            if numeric == 0 and analytic == 0:
                continue
            scale = max(abs(numeric), abs(analytic), abs_floor)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst

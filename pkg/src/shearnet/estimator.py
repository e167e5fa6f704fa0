"""scikit-learn style wrappers around SHEAR-net and the ToF baseline.

``X`` is always a stack of displacement movies shaped ``(n_samples, T, H, W)``;
targets ``y`` are modulus images ``(n_samples, H, W)`` in kPa.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from shearnet import baseline_tof, metrics
from shearnet.model import ModelConfig, load_checkpoint, save_checkpoint
from shearnet.training import TrainConfig, train
from shearnet.wavesim import DisplacementSequence


def check_sequences(X, n_frames=None):
    """Validate a ``(n, T, H, W)`` stack of finite displacement movies."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected X of shape (n_samples, T, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X has no samples")
    if n_frames is not None and X.shape[1] != n_frames:
        raise ValueError(f"expected {n_frames} frames, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


def check_targets(X, y, mask=None):
    y = np.asarray(y, dtype=np.float32)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"y must have shape {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if not np.all(np.isfinite(y)) or y.min() <= 0:
        raise ValueError("y must be finite and strictly positive (kPa)")
    if mask is None:
        # inclusions are stiffer than the background in every generated phantom
        mask = (y > y.reshape(len(y), -1).min(1)[:, None, None]).astype(np.float32)
    else:
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != y.shape:
            raise ValueError("mask must have the same shape as y")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be binary")
    return y, mask


class SHEARNetRegressor(RegressorMixin, BaseEstimator):
    """Modulus-image regressor backed by SHEAR-net.

    Parameters mirror :class:`~shearnet.model.ModelConfig` and
    :class:`~shearnet.training.TrainConfig`. ``fit`` trains from scratch;
    ``validation_fraction`` of the samples (at least one) is held out for the
    per-epoch validation record unless ``X_val`` is given.
    """

    def __init__(self, f=16, m=2, snet_lstm_layers=2, dense_blocks=3, kernel_size=3,
                 activation="tanh", modulus_scale_kpa=10.0, strict_paper_lstm=False,
                 detach_mask_for_me=False, alpha=0.5, lr0=5e-3, epochs=120, batch_size=16, modulus_reduction="mean",
                 validation_fraction=0.2, random_state=0, mask_threshold=0.5):
        self.f = f
        self.m = m
        self.snet_lstm_layers = snet_lstm_layers
        self.dense_blocks = dense_blocks
        self.kernel_size = kernel_size
        self.activation = activation
        self.modulus_scale_kpa = modulus_scale_kpa
        self.strict_paper_lstm = strict_paper_lstm
        self.detach_mask_for_me = detach_mask_for_me
        self.alpha = alpha
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.modulus_reduction = modulus_reduction
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.mask_threshold = mask_threshold

    def _model_config(self, n_frames):
        return ModelConfig(
            f=self.f, m=self.m, t_d=n_frames, snet_lstm_layers=self.snet_lstm_layers,
            dense_blocks=self.dense_blocks, kernel_size=self.kernel_size,
            activation=self.activation, modulus_scale_kpa=self.modulus_scale_kpa,
            strict_paper_lstm=self.strict_paper_lstm,
            detach_mask_for_me=self.detach_mask_for_me,
        )

    def _train_config(self):
        return TrainConfig(alpha=self.alpha, lr0=self.lr0, epochs=self.epochs,
                           batch_size=self.batch_size, modulus_reduction=self.modulus_reduction,
                           seed=self.random_state)

    def fit(self, X, y, mask=None, X_val=None, y_val=None, mask_val=None, out_dir=None):
        X = check_sequences(X)
        y, mask = check_targets(X, y, mask)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X)))) if len(X) > 1 else 0
            va, tr = order[:n_val], order[n_val:] if n_val else order
            if n_val == 0:
                va = order
            X_val, y_val, mask_val = X[va], y[va], mask[va]
            X, y, mask = X[tr], y[tr], mask[tr]
        else:
            X_val = check_sequences(X_val, X.shape[1])
            y_val, mask_val = check_targets(X_val, y_val, mask_val)
        config = self._model_config(X.shape[1])
        config.check_input(X.shape[2], X.shape[3], X.shape[1])
        self.net_, self.history_ = train((X, mask, y), (X_val, mask_val, y_val), config,
                                         self._train_config(), out_dir=out_dir)
        self.n_frames_ = X.shape[1]
        self.image_shape_ = X.shape[2:]
        return self

    @classmethod
    def from_checkpoint(cls, path):
        net = load_checkpoint(path)
        c = net.config
        est = cls(f=c.f, m=c.m, snet_lstm_layers=c.snet_lstm_layers, dense_blocks=c.dense_blocks,
                  kernel_size=c.kernel_size, activation=c.activation,
                  modulus_scale_kpa=c.modulus_scale_kpa, strict_paper_lstm=c.strict_paper_lstm)
        est.net_ = net
        est.n_frames_ = c.t_d
        est.image_shape_ = None
        return est

    def save(self, path):
        check_is_fitted(self, "net_")
        return save_checkpoint(self.net_, path)

    @torch.no_grad()
    def _forward(self, X, batch_size=16):
        check_is_fitted(self, "net_")
        X = check_sequences(X, self.n_frames_)
        self.net_.eval()
        masks, mods = [], []
        for s in range(0, len(X), batch_size):
            m, p = self.net_(torch.as_tensor(X[s:s + batch_size]))
            masks.append(m[:, 0].numpy())
            mods.append(p[:, 0].numpy())
        return np.concatenate(masks), np.concatenate(mods)

    def predict(self, X):
        """Modulus images (kPa), clamped at zero."""
        return np.clip(self._forward(X)[1], 0, None)

    def predict_mask(self, X):
        """Inclusion probabilities in [0, 1]."""
        return self._forward(X)[0]

    def transform(self, X):
        """Stack ``(mask probability, modulus)`` as two channels: ``(n, 2, H, W)``."""
        m, p = self._forward(X)
        return np.stack([m, np.clip(p, 0, None)], 1)

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB) of the predicted modulus images."""
        pred = self.predict(X)
        y = np.asarray(y)
        vals = [metrics.psnr(p, g) for p, g in zip(pred, y)]
        return float(np.average(vals, weights=sample_weight))


class TimeOfFlightEstimator(BaseEstimator):
    """Stateless time-to-peak ToF reconstruction with a scikit-learn interface.

    ``scale`` optionally converts normalized input back to micrometres
    (per-sample array or scalar) before thresholding at ``min_peak_um``.
    """

    def __init__(self, frame_rate_hz=6125.0, pixel_spacing_mm=(40 / 96, 20 / 48),
                 half_window_px=4, min_peak_um=0.5, rho=1000.0, distance="radial",
                 fill_invalid=True):
        self.frame_rate_hz = frame_rate_hz
        self.pixel_spacing_mm = pixel_spacing_mm
        self.half_window_px = half_window_px
        self.min_peak_um = min_peak_um
        self.rho = rho
        self.distance = distance
        self.fill_invalid = fill_invalid

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def reconstruct(self, X, scale=1.0):
        X = check_sequences(X).astype(np.float64)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (len(X),))
        return [
            baseline_tof.reconstruct(
                DisplacementSequence(x * s, self.frame_rate_hz, self.pixel_spacing_mm),
                self.half_window_px, self.min_peak_um, self.rho, distance=self.distance)
            for x, s in zip(X, scale)
        ]

    def predict(self, X, scale=1.0):
        if not getattr(self, "fitted_", False):
            raise NotFittedError("call fit() before predict()")
        res = self.reconstruct(X, scale)
        key = "filled_kpa" if self.fill_invalid else "modulus_kpa"
        return np.stack([getattr(r, key) for r in res])

"""Time-of-flight shear-wave speed and modulus reconstruction (time-to-peak variant).

Arrival time is the per-pixel time of maximum displacement; local speed is
the inverse slope of a least-squares line through arrival times of the
neighbouring pixels on the same row and the same side of the push.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shearnet.wavesim import DisplacementSequence

METHOD_LABEL = "tof-time-to-peak"


@dataclass
class ArrivalMap:
    """Time-to-peak (ms); ``time_ms`` is NaN wherever ``valid`` is False."""

    time_ms: np.ndarray
    valid: np.ndarray
    peak_um: np.ndarray
    pixel_spacing_mm: tuple


def time_to_peak(seq: DisplacementSequence, min_peak_um=0.5) -> ArrivalMap:
    """Per-pixel argmax over time refined by a 3-point parabola.

    Pixels whose peak displacement is below ``min_peak_um`` are invalid.
    """
    u = np.asarray(seq.frames, dtype=np.float64)
    T = u.shape[0]
    if T < 3:
        raise ValueError("time_to_peak needs at least 3 frames")
    k = np.argmax(u, axis=0)
    peak = np.take_along_axis(u, k[None], 0)[0]
    kc = np.clip(k, 1, T - 2)
    y0 = np.take_along_axis(u, (kc - 1)[None], 0)[0]
    y1 = np.take_along_axis(u, kc[None], 0)[0]
    y2 = np.take_along_axis(u, (kc + 1)[None], 0)[0]
    denom = y0 - 2 * y1 + y2
    interior = (k >= 1) & (k <= T - 2) & (denom < 0)
    safe = np.where(interior, denom, -1.0)
    shift = np.where(interior, 0.5 * (y0 - y2) / safe, 0.0)
    frame = k + shift
    valid = peak >= min_peak_um
    t = seq.t0_ms + frame * 1e3 / seq.frame_rate_hz
    return ArrivalMap(np.where(valid, t, np.nan), valid, peak, seq.pixel_spacing_mm)


def _pixel_coords(shape, spacing):
    dz, dx = spacing
    h, w = shape
    return (np.arange(w) + 0.5) * dx, (np.arange(h) + 0.5) * dz


def local_speed(arrival: ArrivalMap, half_window_px=4, source_mm=None, distance="radial",
                min_samples=2):
    """Speed map (m/s) from lateral regressions of arrival time on distance.

    ``source_mm`` is the push position ``(x, z)`` in ROI coordinates (default:
    ROI centre). ``distance`` selects the regressor: ``"radial"`` (distance from
    the source) or ``"lateral"`` (|x - x_source|). Windows never straddle the
    push column. A pixel is valid only if every pixel in its window is valid,
    at least ``min_samples`` remain and the fitted slope is non-zero.
    """
    if half_window_px < 1:
        raise ValueError("half_window_px must be >= 1")
    if distance not in ("radial", "lateral"):
        raise ValueError(f"unknown distance {distance!r}")
    t = arrival.time_ms
    h, w = t.shape
    xs, zs = _pixel_coords(t.shape, arrival.pixel_spacing_mm)
    if source_mm is None:
        source_mm = (w * arrival.pixel_spacing_mm[1] / 2, h * arrival.pixel_spacing_mm[0] / 2)
    x0, z0 = source_mm
    dxs = xs - x0
    side = np.sign(dxs)
    if distance == "radial":
        r = np.sqrt(dxs[None, :] ** 2 + (zs[:, None] - z0) ** 2)
    else:
        r = np.broadcast_to(np.abs(dxs)[None, :], (h, w))

    speed = np.full((h, w), np.nan)
    valid = arrival.valid
    for j in range(w):
        lo, hi = max(0, j - half_window_px), min(w, j + half_window_px + 1)
        cols = np.arange(lo, hi)
        cols = cols[side[cols] == side[j]]
        if len(cols) < min_samples:
            continue
        ok = valid[:, cols].all(axis=1)
        rr, tt = r[:, cols], np.where(valid[:, cols], t[:, cols], 0.0)
        rm = rr.mean(1, keepdims=True)
        tm = tt.mean(1, keepdims=True)
        sxx = ((rr - rm) ** 2).sum(1)
        sxy = ((rr - rm) * (tt - tm)).sum(1)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)  # ms per mm
            c = np.where(slope != 0, 1.0 / np.abs(np.where(slope != 0, slope, 1.0)), np.nan)
        speed[:, j] = np.where(ok & (sxx > 0) & (slope != 0), c, np.nan)
    return speed


def modulus_from_speed(speed, rho=1000.0):
    """Shear modulus in kPa from speed in m/s; NaN propagates."""
    speed = np.asarray(speed, dtype=np.float64)
    return rho * speed ** 2 / 1e3


@dataclass
class ToFResult:
    modulus_kpa: np.ndarray
    valid: np.ndarray
    filled_kpa: np.ndarray
    speed: np.ndarray
    arrival: ArrivalMap
    method: str = METHOD_LABEL


DEFAULT_SPEED_RANGE = (0.5, 15.0)


def reconstruct(seq: DisplacementSequence, half_window_px=4, min_peak_um=0.5, rho=1000.0,
                source_mm=None, distance="radial", speed_range_m_s=DEFAULT_SPEED_RANGE):
    """Full ToF chain. ``filled_kpa`` replaces invalid pixels by the median valid
    modulus (or 0 when nothing is valid); ``valid`` flags which pixels were measured.

    Speeds outside ``speed_range_m_s`` (near-flat arrival fits) are flagged
    invalid; pass ``None`` to keep every finite estimate.
    """
    arrival = time_to_peak(seq, min_peak_um)
    speed = local_speed(arrival, half_window_px, source_mm, distance)
    if speed_range_m_s is not None:
        lo, hi = speed_range_m_s
        with np.errstate(invalid="ignore"):
            speed = np.where((speed >= lo) & (speed <= hi), speed, np.nan)
    mod = modulus_from_speed(speed, rho)
    valid = np.isfinite(mod)
    fill = float(np.median(mod[valid])) if valid.any() else 0.0
    return ToFResult(mod, valid, np.where(valid, mod, fill), speed, arrival)

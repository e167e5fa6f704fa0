"""Image quality and overlap metrics for modulus reconstructions.

PSNR uses the ground-truth peak, SNR the ground-truth energy, and SSIM a
7x7 uniform window with ``K1 = 0.01``, ``K2 = 0.03`` and dynamic range equal
to the ground-truth peak. Perfect matches report :data:`CAP_DB`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

CAP_DB = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_FIELDS = ("sample_id", "psnr_db", "snr_db", "ssim", "dsc", "bg_mean", "bg_sd",
                 "inc_mean", "inc_sd", "runtime_s")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
    return pred, gt


def psnr(pred, gt):
    pred, gt = _pair(pred, gt)
    peak = gt.max()
    if peak <= 0:
        raise ValueError("ground truth has no positive peak; PSNR undefined")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return CAP_DB
    return min(CAP_DB, 10 * math.log10(peak ** 2 / mse))


def snr(pred, gt):
    pred, gt = _pair(pred, gt)
    signal = np.sum(gt ** 2)
    if signal == 0:
        raise ValueError("ground truth has zero energy; SNR undefined")
    noise = np.sum((gt - pred) ** 2)
    if noise == 0:
        return CAP_DB
    return min(CAP_DB, 10 * math.log10(signal / noise))


def ssim(pred, gt, window=SSIM_WINDOW, k1=SSIM_K1, k2=SSIM_K2):
    """Mean local SSIM over all window positions fully inside the image."""
    x, y = _pair(pred, gt)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} SSIM window")
    L = y.max()
    if L <= 0:
        raise ValueError("ground truth has no positive peak; SSIM dynamic range undefined")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    filt = lambda a: ndimage.uniform_filter(a, size=window, mode="reflect")
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = window // 2
    return float(s[pad:-pad, pad:-pad].mean())


def dsc(pred_mask, gt_mask):
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / total


def jaccard(pred_mask, gt_mask):
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else np.logical_and(p, g).sum() / union


def region_stats(image, mask):
    """``{"background": (mean, sd), "inclusion": (mean, sd)}``; empty regions are omitted.

    SD is the population standard deviation.
    """
    image = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if image.shape != m.shape:
        raise ValueError("image and mask shapes differ")
    out = {}
    for name, sel in (("background", ~m), ("inclusion", m)):
        vals = image[sel]
        if vals.size:
            out[name] = (float(vals.mean()), float(vals.std()))
    return out


@dataclass
class MetricsReport:
    sample_id: str
    psnr_db: float
    snr_db: float
    ssim: float
    dsc: float | None
    bg_mean: float | None = None
    bg_sd: float | None = None
    inc_mean: float | None = None
    inc_sd: float | None = None
    runtime_s: float = 0.0

    def row(self, digits=None):
        """CSV cells; ``digits`` rounds to that many significant digits and
        blanks the wall-clock column so rows are reproducible byte for byte."""
        cells = []
        for f in REPORT_FIELDS:
            v = getattr(self, f)
            if v is None or (digits is not None and f == "runtime_s"):
                cells.append("")
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(repr(float(v)) if digits is None else f"{float(v):.{digits}g}")
        return cells


def score_sample(sample_id, pred_modulus, pred_mask, gt_modulus, gt_mask, runtime_s=0.0,
                 threshold=0.5):
    """Metrics for one reconstruction; ``pred_mask`` holds probabilities.

    Methods without a segmentation output pass ``pred_mask=None`` and get no DSC.
    """
    pred_modulus = np.clip(np.asarray(pred_modulus, dtype=np.float64), 0, None)
    stats = region_stats(pred_modulus, gt_mask)
    bg = stats.get("background", (None, None))
    inc = stats.get("inclusion", (None, None))
    return MetricsReport(
        sample_id=sample_id,
        psnr_db=psnr(pred_modulus, gt_modulus),
        snr_db=snr(pred_modulus, gt_modulus),
        ssim=ssim(pred_modulus, gt_modulus),
        dsc=None if pred_mask is None else dsc(np.asarray(pred_mask) >= threshold, gt_mask),
        bg_mean=bg[0], bg_sd=bg[1], inc_mean=inc[0], inc_sd=inc[1],
        runtime_s=float(runtime_s),
    )


def aggregate(reports):
    """Mean of every numeric field; order-independent (sorted by id, exact summation)."""
    reports = sorted(reports, key=lambda r: r.sample_id)
    out = {"n_samples": len(reports)}
    for f in REPORT_FIELDS[1:]:
        vals = [getattr(r, f) for r in reports if getattr(r, f) is not None]
        out[f] = math.fsum(vals) / len(vals) if vals else None
    return out


def reports_csv(reports, digits=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in sorted(reports, key=lambda r: r.sample_id):
        w.writerow(r.row(digits))
    return buf.getvalue()


def format_table(agg, label=""):
    lines = [f"{label} ({agg['n_samples']} samples)" if label else f"{agg['n_samples']} samples"]
    names = {"psnr_db": "PSNR [dB]", "snr_db": "SNR [dB]", "ssim": "SSIM", "dsc": "DSC",
             "bg_mean": "Background mean [kPa]", "bg_sd": "Background SD [kPa]",
             "inc_mean": "Inclusion mean [kPa]", "inc_sd": "Inclusion SD [kPa]",
             "runtime_s": "Run time [s]"}
    for k, name in names.items():
        v = agg.get(k)
        lines.append(f"  {name:<24} {'n/a' if v is None else f'{v:.4f}'}")
    return "\n".join(lines)


def write_reports(reports, csv_path, json_path=None, extra=None, digits=None):
    """Per-sample CSV plus an optional JSON with the aggregate and every row."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(reports_csv(reports, digits), encoding="utf-8")
    agg = aggregate(reports)
    if json_path:
        payload = {"aggregate": agg, "samples": [asdict(r) for r in sorted(reports, key=lambda r: r.sample_id)]}
        if extra:
            payload.update(extra)
        Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return agg

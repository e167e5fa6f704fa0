"""Score reconstructions over a dataset split.

Three prediction sources are supported: a SHEAR-net model, a predictions
directory (``<root>/predictions.json`` + ``<root>/<id>/modulus.f32`` and an
optional ``mask.f32``), and the ground truth itself, which is useful for
checking the pipeline.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from shearnet import baseline_tof, binio, metrics
from shearnet.phantomgen import Dataset, DatasetError
from shearnet.wavesim import DisplacementSequence

PREDICTIONS_VERSION = 1


def pixel_spacing(dataset: Dataset):
    """``(dz, dx)`` in mm of the dataset's ROI grid."""
    cfg = dataset.config
    if cfg is None:
        raise DatasetError(f"{dataset.root}: manifest has no generator config")
    _, _, width, depth = cfg.roi_mm
    h, w = cfg.out_shape
    return depth / h, width / w


@torch.no_grad()
def predict_model(net, disp):
    """``(mask, modulus, runtime_s)`` for one ``T x H x W`` sequence."""
    net.eval()
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(disp)[None], dtype=dtype)
    t0 = time.perf_counter()
    mask, mod = net(x)
    elapsed = time.perf_counter() - t0
    return mask[0, 0].numpy().astype(np.float64), mod[0, 0].numpy().astype(np.float64), elapsed


def _ids(dataset, split):
    ids = dataset.ids(split)
    if not ids:
        raise DatasetError(f"split {split!r} of {dataset.root} is empty")
    return ids


def _score(dataset, sample_id, pred_mod, pred_mask, runtime, threshold):
    return metrics.score_sample(
        sample_id, pred_mod, pred_mask,
        dataset.load(sample_id, "modulus").astype(np.float64),
        dataset.load(sample_id, "mask"), runtime, threshold,
    )


def evaluate_model(net, dataset: Dataset, split="test", threshold=0.5):
    reports = []
    for sid in _ids(dataset, split):
        mask, mod, runtime = predict_model(net, dataset.load(sid, "disp"))
        reports.append(_score(dataset, sid, mod, mask, runtime, threshold))
    return reports


def evaluate_ground_truth(dataset: Dataset, split="test"):
    """Score the labels against themselves: every DSC is 1 and PSNR hits the cap."""
    return [
        _score(dataset, sid, dataset.load(sid, "modulus"), dataset.load(sid, "mask"), 0.0, 0.5)
        for sid in _ids(dataset, split)
    ]


def write_predictions(root, predictions, method, extra=None):
    """``predictions`` maps sample id to ``{"modulus": ..., "mask": ...}`` (mask optional)."""
    root = Path(root)
    index = {}
    for sid, arrays in sorted(predictions.items()):
        index[sid] = {}
        for name, arr in arrays.items():
            binio.write_array(root / sid / f"{name}.f32", arr)
            index[sid][name] = list(np.shape(arr))
    binio.write_json(root / "predictions.json", {
        "format_version": PREDICTIONS_VERSION, "method": method, "samples": index,
        **(extra or {}),
    })


def read_predictions(root):
    root = Path(root)
    meta_path = root / "predictions.json"
    if not meta_path.exists():
        raise DatasetError(f"no predictions.json under {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != PREDICTIONS_VERSION:
        raise DatasetError(f"{meta_path}: unsupported format version {meta.get('format_version')}")
    out = {}
    for sid, shapes in meta["samples"].items():
        out[sid] = {name: binio.read_array(root / sid / f"{name}.f32", tuple(shape))
                    for name, shape in shapes.items()}
    return meta, out


def evaluate_predictions(pred_root, dataset: Dataset, split="test", threshold=0.5):
    meta, preds = read_predictions(pred_root)
    reports = []
    for sid in _ids(dataset, split):
        if sid not in preds:
            raise DatasetError(f"{pred_root}: no prediction for sample {sid}")
        p = preds[sid]
        reports.append(_score(dataset, sid, p["modulus"], p.get("mask"),
                              float(meta.get("runtime_s", {}).get(sid, 0.0)), threshold))
    return reports


def run_baseline(dataset: Dataset, split="test", half_window_px=4, min_peak_um=0.5,
                 distance="radial"):
    """ToF reconstruction of every sample in ``split``.

    Returns ``(reports, predictions, runtimes)``; the stored displacement is
    rescaled to micrometres with the record's ``scale`` before thresholding.
    """
    spacing = pixel_spacing(dataset)
    rho = dataset.config.rho
    reports, preds, runtimes = [], {}, {}
    for sid in _ids(dataset, split):
        rec = dataset.record(sid)
        seq = DisplacementSequence(dataset.load(sid, "disp").astype(np.float64) * rec["scale"],
                                   rec["frame_rate_hz"], spacing)
        t0 = time.perf_counter()
        res = baseline_tof.reconstruct(seq, half_window_px, min_peak_um, rho, distance=distance)
        runtimes[sid] = time.perf_counter() - t0
        preds[sid] = {"modulus": res.filled_kpa.astype(np.float32),
                      "valid": res.valid.astype(np.float32)}
        reports.append(_score(dataset, sid, res.filled_kpa, None, runtimes[sid], 0.5))
    return reports, preds, runtimes

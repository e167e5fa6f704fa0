"""Random phantom synthesis, displacement post-processing and dataset files.

A dataset root holds ``manifest.json`` and ``samples/<id>/{disp,mask,modulus}.f32``.
``disp`` is the normalized displacement movie (``T x H x W``); multiply by
the record's ``scale`` to recover micrometres.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from shearnet import binio
from shearnet.wavesim import (
    ARFPush,
    DisplacementSequence,
    ElasticPhantom,
    Inclusion,
    calibrate_amplitude,
    extract_roi_frames,
    roi_pixel_centers,
    simulate,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
KINDS = ("circle", "ellipse", "homogeneous")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Invalid or inconsistent dataset on disk."""


@dataclass
class GenConfig:
    """Geometry, sampling and admissible parameter sets for phantom generation.

    The ROI ``(x0, z0, width, depth)`` in mm sits inside the simulated domain;
    labels and displacement frames are sampled on its ``out_shape`` pixel grid.
    """

    extent_mm: tuple = (40.0, 40.0)
    grid_spacing_mm: float = 0.2
    roi_mm: tuple = (10.0, 0.0, 20.0, 40.0)
    out_shape: tuple = (96, 48)
    n_frames: int = 49
    frame_rate_hz: float = 6125.0
    total_time_ms: float = 18.0
    boundary: str = "fixed"
    background_kpa: tuple = (10.0, 20.0)
    multipliers: tuple = (2, 4, 6, 8, 10)
    radius_mm: tuple = (1.0, 5.0)
    max_aspect: float = 3.0
    n_inclusions: tuple = (1, 1)
    composition: dict = field(default_factory=lambda: {"circle": 300, "ellipse": 300, "homogeneous": 200})
    split_fractions: tuple = (0.60, 0.25, 0.15)
    force_fraction: float = 1.0
    target_peak_um: float = 20.0
    jitter_sd_um: float = 0.1
    # temporal LOWESS after jitter (used for measured data); 0 disables
    lowess_window: int = 0
    rho: float = 1000.0
    max_retries: int = 1000

    def __post_init__(self):
        self.extent_mm = tuple(self.extent_mm)
        self.roi_mm = tuple(self.roi_mm)
        self.out_shape = tuple(int(v) for v in self.out_shape)
        self.background_kpa = tuple(self.background_kpa)
        self.multipliers = tuple(self.multipliers)
        self.radius_mm = tuple(self.radius_mm)
        self.n_inclusions = tuple(self.n_inclusions)
        self.split_fractions = tuple(self.split_fractions)
        if not 0 < self.force_fraction <= 1:
            raise ValueError("force_fraction must lie in (0, 1]")
        if self.lowess_window and (self.lowess_window % 2 == 0 or self.lowess_window > self.n_frames):
            raise ValueError(f"lowess_window must be odd and <= n_frames, got {self.lowess_window}")
        if abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if self.radius_mm[0] <= 0 or self.radius_mm[0] > self.radius_mm[1]:
            raise ValueError(f"bad radius range {self.radius_mm}")
        unknown = set(self.composition) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown phantom kinds {sorted(unknown)}")

    @property
    def total_count(self):
        return sum(self.composition.values())

    @property
    def focus_mm(self):
        x0, z0, w, d = self.roi_mm
        return (x0 + w / 2, z0 + d / 2)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = {
    "paper": GenConfig(),
    "desk": GenConfig(
        out_shape=(48, 24), n_frames=16, frame_rate_hz=2000.0, total_time_ms=8.0,
        composition={"circle": 40, "ellipse": 40, "homogeneous": 20},
    ),
}


def preset(name, **overrides) -> GenConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# --------------------------------------------------------------------------
# phantom specification
# --------------------------------------------------------------------------

@dataclass
class InclusionSpec:
    shape: str
    center_mm: tuple
    radii_mm: tuple
    multiplier: float

    def overlaps(self, other, gap_mm=0.0):
        # conservative test on bounding circles
        d = math.dist(self.center_mm, other.center_mm)
        return d < max(self.radii_mm) + max(other.radii_mm) + gap_mm


@dataclass
class PhantomSpec:
    background_kpa: float
    inclusions: list
    force_fraction: float = 1.0
    rng_seed: int | list | None = None

    @property
    def kind(self):
        if not self.inclusions:
            return "homogeneous"
        return self.inclusions[0].shape

    def to_dict(self):
        return {
            "background_kpa": self.background_kpa,
            "inclusions": [asdict(i) for i in self.inclusions],
            "force_fraction": self.force_fraction,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        incs = [InclusionSpec(i["shape"], tuple(i["center_mm"]), tuple(i["radii_mm"]), i["multiplier"])
                for i in d["inclusions"]]
        return cls(d["background_kpa"], incs, d["force_fraction"], d.get("rng_seed"))


@dataclass
class SampleLabels:
    mask: np.ndarray
    modulus_kpa: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.modulus_kpa.shape:
            raise ValueError("mask and modulus shapes differ")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        if self.modulus_kpa.min() <= 0:
            raise ValueError("modulus must be positive")


def _draw_radii(rng, shape, config):
    lo, hi = config.radius_mm
    if shape == "circle":
        r = rng.uniform(lo, hi)
        return (r, r)
    while True:
        a, b = rng.uniform(lo, hi, size=2)
        if max(a, b) / min(a, b) <= config.max_aspect:
            return (float(a), float(b))


def sample_phantom_spec(rng, config: GenConfig, kind=None, seed=None) -> PhantomSpec:
    """Draw a phantom from the admissible sets in ``config``.

    ``kind`` is ``"circle"``, ``"ellipse"`` or ``"homogeneous"``; when omitted it
    is drawn in proportion to ``config.composition``.
    """
    if kind is None:
        kinds = [k for k in KINDS if config.composition.get(k, 0) > 0]
        weights = np.array([config.composition[k] for k in kinds], float)
        kind = kinds[rng.choice(len(kinds), p=weights / weights.sum())]
    if kind not in KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}")
    background = float(config.background_kpa[rng.integers(len(config.background_kpa))])
    incs = []
    if kind != "homogeneous":
        lo, hi = config.n_inclusions
        n = int(rng.integers(lo, hi + 1))
        x0, z0, w, d = config.roi_mm
        tries = 0
        while len(incs) < n:
            tries += 1
            if tries > config.max_retries:
                raise ValueError(
                    f"could not place {n} non-overlapping inclusions inside the ROI "
                    f"{config.roi_mm} after {config.max_retries} attempts"
                )
            radii = _draw_radii(rng, kind, config)
            rx, rz = radii
            if 2 * rx > w or 2 * rz > d:
                continue
            center = (float(rng.uniform(x0 + rx, x0 + w - rx)), float(rng.uniform(z0 + rz, z0 + d - rz)))
            mult = float(config.multipliers[rng.integers(len(config.multipliers))])
            cand = InclusionSpec(kind, center, radii, mult)
            if any(cand.overlaps(o) for o in incs):
                continue
            incs.append(cand)
    return PhantomSpec(background, incs, config.force_fraction, seed)


def rasterize_phantom(spec: PhantomSpec, config: GenConfig):
    """Simulation phantom on the solver grid plus labels on the ROI pixel grid."""
    bg_pa = spec.background_kpa * 1e3
    h = config.grid_spacing_mm
    nx = int(round(config.extent_mm[0] / h))
    nz = int(round(config.extent_mm[1] / h))
    x = (np.arange(nx) + 0.5) * h
    z = (np.arange(nz) + 0.5) * h
    zz, xx = np.meshgrid(z, x, indexing="ij")
    mu = np.full((nz, nx), bg_pa)
    incs = []
    for s in spec.inclusions:
        inc = Inclusion(s.shape, s.center_mm, s.radii_mm, bg_pa * s.multiplier)
        mu[inc.contains(xx, zz)] = inc.modulus_pa
        incs.append(inc)
    phantom = ElasticPhantom(mu, h, rho=config.rho, extent_mm=config.extent_mm, inclusions=incs)

    xs, zs = roi_pixel_centers(config.roi_mm, config.out_shape)
    rz, rx = np.meshgrid(zs, xs, indexing="ij")
    mask = np.zeros(config.out_shape, dtype=np.float32)
    modulus = np.full(config.out_shape, spec.background_kpa, dtype=np.float32)
    for inc in incs:
        inside = inc.contains(rx, rz)
        mask[inside] = 1.0
        modulus[inside] = inc.modulus_pa / 1e3
    return phantom, SampleLabels(mask, modulus)


# --------------------------------------------------------------------------
# displacement post-processing
# --------------------------------------------------------------------------

def add_tracking_jitter(seq: DisplacementSequence, jitter_sd_um, rng) -> DisplacementSequence:
    """Add i.i.d. zero-mean Gaussian jitter (um) to every pixel of every frame."""
    if jitter_sd_um < 0:
        raise ValueError("jitter_sd_um must be >= 0")
    if jitter_sd_um == 0:
        return seq.replace(seq.frames.copy())
    return seq.replace(seq.frames + rng.normal(0.0, jitter_sd_um, size=seq.frames.shape))


def lowess_matrix(n, window):
    """``n x n`` operator applying local linear tricube-weighted regression."""
    if window % 2 != 1 or window < 3:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if window > n:
        raise ValueError(f"window {window} is longer than the series ({n} samples)")
    half = window // 2
    S = np.zeros((n, n))
    t = np.arange(n, dtype=float)
    for i in range(n):
        lo = min(max(i - half, 0), n - window)
        idx = np.arange(lo, lo + window)
        dist = np.abs(t[idx] - t[i])
        w = (1 - (dist / (dist.max() + 1.0)) ** 3) ** 3
        X = np.stack([np.ones(window), t[idx] - t[i]], 1)
        XtW = X.T * w
        S[i, idx] = np.linalg.solve(XtW @ X, XtW)[0]
    return S


def smooth_temporal_lowess(seq: DisplacementSequence, window=15) -> DisplacementSequence:
    """Per-pixel LOWESS smoothing along time (no robustness iterations)."""
    T = seq.n_frames
    S = lowess_matrix(T, window)
    flat = seq.frames.reshape(T, -1)
    return seq.replace((S @ flat).reshape(seq.frames.shape))


def normalize_sample(seq: DisplacementSequence):
    """Scale by the peak absolute displacement; all-zero input keeps scale 1."""
    frames = seq.frames
    if not np.all(np.isfinite(frames)):
        raise ValueError("cannot normalize non-finite displacement")
    peak = float(np.max(np.abs(frames)))
    scale = peak if peak > 0 else 1.0
    return seq.replace(frames / scale), scale


# --------------------------------------------------------------------------
# sample generation
# --------------------------------------------------------------------------

def _streams(seed, index):
    ss = np.random.SeedSequence([int(seed), int(index)])
    spec_ss, jitter_ss = ss.spawn(2)
    return np.random.default_rng(spec_ss), np.random.default_rng(jitter_ss)


def simulate_sample(spec: PhantomSpec, config: GenConfig):
    """Clean displacement (um, calibrated to the target peak) and labels for ``spec``."""
    phantom, labels = rasterize_phantom(spec, config)
    push = ARFPush(focus=config.focus_mm, intensity_fraction=spec.force_fraction)
    wave = simulate(phantom, push, total_time_ms=config.total_time_ms, boundary=config.boundary)
    seq = extract_roi_frames(wave, config.roi_mm, config.out_shape, config.frame_rate_hz,
                             config.n_frames)
    seq, _ = calibrate_amplitude(seq, push, config.target_peak_um)
    return seq, labels


@dataclass
class Sample:
    sample_id: str
    spec: PhantomSpec
    disp: np.ndarray
    scale: float
    labels: SampleLabels
    split: str = "train"
    frame_rate_hz: float = 0.0


def make_sample(index, config: GenConfig, seed, kind=None, split="train", spec=None):
    spec_rng, jitter_rng = _streams(seed, index)
    if spec is None:
        spec = sample_phantom_spec(spec_rng, config, kind=kind, seed=[int(seed), int(index)])
    seq, labels = simulate_sample(spec, config)
    seq = add_tracking_jitter(seq, config.jitter_sd_um, jitter_rng)
    if config.lowess_window:
        seq = smooth_temporal_lowess(seq, config.lowess_window)
    seq, scale = normalize_sample(seq)
    return Sample(f"{index:05d}", spec, seq.frames.astype(np.float32), scale, labels, split,
                  config.frame_rate_hz)


def plan_dataset(config: GenConfig, seed, count=None):
    """Deterministic ``(index, kind, split)`` assignment for a dataset.

    ``count`` rescales the composition proportionally when given.
    """
    comp = dict(config.composition)
    total = sum(comp.values())
    if count is not None and count != total:
        raw = {k: v * count / total for k, v in comp.items()}
        comp = {k: int(math.floor(v)) for k, v in raw.items()}
        rest = count - sum(comp.values())
        for k in sorted(raw, key=lambda k: raw[k] - comp[k], reverse=True)[:rest]:
            comp[k] += 1
        total = count
    kinds = [k for k in KINDS for _ in range(comp.get(k, 0))]
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 2 ** 31])).permutation(total)
    n_train = int(round(config.split_fractions[0] * total))
    n_val = int(round(config.split_fractions[1] * total))
    splits = {}
    for rank, i in enumerate(order):
        splits[int(i)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return [(i, kinds[i], splits[i]) for i in range(total)]


def _make_planned(args):
    index, kind, split, config, seed = args
    return make_sample(index, config, seed, kind=kind, split=split)


def generate_dataset(config: GenConfig, seed, count=None, n_jobs=1):
    """Generate every sample in the plan; results are independent of ``n_jobs``."""
    plan = plan_dataset(config, seed, count)
    jobs = [(i, k, s, config, seed) for i, k, s in plan]
    if n_jobs == 1:
        return [_make_planned(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_make_planned, jobs))


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list
    config: dict
    seed: int | None = None
    format_version: int = MANIFEST_VERSION

    def validate(self, root=None):
        seen = {}
        for rec in self.records:
            if rec["split"] not in SPLITS:
                raise DatasetError(f"sample {rec['id']}: unknown split {rec['split']!r}")
            if rec["id"] in seen and seen[rec["id"]] != rec["split"]:
                raise DatasetError(
                    f"sample {rec['id']} appears in both {seen[rec['id']]!r} and {rec['split']!r} splits"
                )
            if rec["id"] in seen:
                raise DatasetError(f"duplicate sample id {rec['id']}")
            seen[rec["id"]] = rec["split"]
        if root is not None:
            for rec in self.records:
                for name, rel in rec["files"].items():
                    p = Path(root) / rel
                    if not p.exists():
                        raise DatasetError(f"sample {rec['id']}: missing file {p}")
                    expected = int(np.prod(rec["shapes"][name])) * 4
                    if p.stat().st_size != expected:
                        raise DatasetError(
                            f"sample {rec['id']}: {p} has {p.stat().st_size} bytes, "
                            f"expected {expected} for shape {rec['shapes'][name]}"
                        )

    def split(self, name):
        return [r for r in self.records if r["split"] == name]

    def to_dict(self):
        return {"format_version": self.format_version, "seed": self.seed,
                "config": self.config, "samples": self.records}


def write_dataset(samples, root, config: GenConfig | None = None, seed=None) -> DatasetManifest:
    root = Path(root)
    records = []
    for s in samples:
        base = Path("samples") / s.sample_id
        arrays = {"disp": s.disp, "mask": s.labels.mask, "modulus": s.labels.modulus_kpa}
        files, shapes = {}, {}
        for name, arr in arrays.items():
            rel = base / f"{name}.f32"
            binio.write_array(root / rel, arr)
            files[name] = rel.as_posix()
            shapes[name] = list(arr.shape)
        records.append({
            "id": s.sample_id, "split": s.split, "spec": s.spec.to_dict(), "scale": s.scale,
            "kind": s.spec.kind, "frame_rate_hz": s.frame_rate_hz,
            "files": files, "shapes": shapes,
        })
    manifest = DatasetManifest(records, config.to_dict() if config else {}, seed)
    manifest.validate()
    binio.write_json(root / "manifest.json", manifest.to_dict())
    return manifest


class Dataset:
    """Lazy reader over a dataset root."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DatasetError(f"no manifest.json under {self.root}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: malformed manifest ({e})") from e
        if raw.get("format_version") != MANIFEST_VERSION:
            raise DatasetError(
                f"{path}: unsupported format version {raw.get('format_version')} "
                f"(expected {MANIFEST_VERSION})"
            )
        self.manifest = DatasetManifest(raw["samples"], raw.get("config", {}), raw.get("seed"),
                                        raw["format_version"])
        self.manifest.validate(self.root)
        self._by_id = {r["id"]: r for r in self.manifest.records}

    @property
    def config(self):
        return GenConfig.from_dict(self.manifest.config) if self.manifest.config else None

    def ids(self, split=None):
        return [r["id"] for r in self.manifest.records if split is None or r["split"] == split]

    def record(self, sample_id):
        return self._by_id[sample_id]

    def load(self, sample_id, name):
        rec = self._by_id[sample_id]
        try:
            return binio.read_array(self.root / rec["files"][name], tuple(rec["shapes"][name]))
        except binio.ArrayFileError as e:
            raise DatasetError(f"sample {sample_id}: {e}") from e

    def arrays(self, split=None):
        """Stacked ``(disp, mask, modulus)`` arrays for a split."""
        ids = self.ids(split)
        if not ids:
            raise DatasetError(f"split {split!r} is empty in {self.root}")
        disp = np.stack([self.load(i, "disp") for i in ids])
        mask = np.stack([self.load(i, "mask") for i in ids])
        modulus = np.stack([self.load(i, "modulus") for i in ids])
        return disp, mask, modulus


def read_dataset(root) -> Dataset:
    return Dataset(root)

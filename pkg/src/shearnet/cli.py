"""Command-line entry point: ``shearnet <subcommand> [options] [key=value ...]``.

Subcommands: simulate, gendata, train, eval, baseline, plot. Trailing
``key=value`` arguments override fields of the generator (``gen.``), model
(``model.``) or training (``train.``) configuration; the section prefix may be
dropped when the key is unambiguous. Values are parsed as JSON when possible.

Every run writes ``run_config.json`` next to its outputs. Passing that file
back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from shearnet import binio, evaluation, metrics, phantomgen
from shearnet.model import ModelConfig, load_checkpoint
from shearnet.training import NumericalError, TrainConfig
from shearnet.wavesim import SimulationError

logger = logging.getLogger("shearnet")

DATA_ROOT_ENV = "SHEARNET_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SECTIONS = {"gen": phantomgen.GenConfig, "model": ModelConfig, "train": TrainConfig}
FIXED_DIGITS = 8


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def parse_overrides(items, sections):
    """``["model.f=8", "epochs=2"]`` -> ``{"model": {"f": 8}, "train": {"epochs": 2}}``."""
    out = {s: {} for s in sections}
    for item in items:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise UsageError(f"override {item!r}: section must be one of {sorted(sections)}")
            owners = [sec] if name in _fields(sec) else []
        else:
            name = key
            owners = [s for s in sections if name in _fields(s)]
        if not owners:
            raise UsageError(f"unknown override key {key!r}")
        if len(owners) > 1:
            raise UsageError(f"override {key!r} is ambiguous; prefix it with one of {owners}")
        out[owners[0]][name] = value
    return out


def _fields(section):
    return {f.name for f in dataclasses.fields(SECTIONS[section])}


def _load_config_file(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from e


def _section(file_cfg, overrides, name, base=None):
    vals = dict(base or {})
    vals.update(file_cfg.get(name, {}))
    vals.update(overrides.get(name, {}))
    unknown = set(vals) - _fields(name)
    if unknown:
        raise UsageError(f"unknown {name} settings {sorted(unknown)}")
    return vals


def _resolve_common(args, sections):
    file_cfg = _load_config_file(args.config)
    if args.seed is None:
        args.seed = file_cfg.get("seed", 0)
    if args.preset is None:
        args.preset = file_cfg.get("preset", "desk")
    if args.preset not in phantomgen.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}")
    return file_cfg, parse_overrides(args.overrides, sections)


def _gen_config(args, file_cfg, overrides):
    vals = _section(file_cfg, overrides, "gen")
    if getattr(args, "force_fraction", None) is not None:
        vals["force_fraction"] = args.force_fraction
    return phantomgen.preset(args.preset, **vals)


def write_snapshot(out_dir, args, inputs=None, **sections):
    """Resolved configuration and code version for an output directory.

    Output paths are left out so identical runs into different directories
    produce identical snapshots.
    """
    snap = {
        "subcommand": args.command,
        "seed": args.seed,
        "preset": args.preset,
        "inputs": {k: str(v) for k, v in (inputs or {}).items() if v is not None},
        "code_version": binio.code_version(),
    }
    for name, cfg in sections.items():
        snap[name] = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    binio.write_json(Path(out_dir) / "run_config.json", snap)
    return snap


def _default_root(value, what):
    if value is not None:
        return Path(value)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise UsageError(f"{what} is required (or set {DATA_ROOT_ENV})")


def _out_dir(args, fresh_marker=None):
    out = Path(args.out)
    if fresh_marker and (out / fresh_marker).exists() and not args.overwrite:
        raise FileExistsError(f"{out / fresh_marker} exists; pass --overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_fixed_precision(args):
    if getattr(args, "fixed_precision", False):
        import torch
        torch.set_num_threads(1)
        return FIXED_DIGITS
    return None


def _resolve_checkpoint(path):
    path = Path(path)
    if (path / "model.json").exists():
        return path
    if (path / "last" / "model.json").exists():
        return path / "last"
    raise FileNotFoundError(f"no checkpoint (model.json) at {path} or {path / 'last'}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args):
    """Simulate one phantom and store its wave field, ROI movie and labels."""
    from shearnet.wavesim import ARFPush, calibrate_amplitude, extract_roi_frames, simulate, wavefront_speed

    file_cfg, ov = _resolve_common(args, ("gen",))
    cfg = _gen_config(args, file_cfg, ov)
    out = _out_dir(args)
    rng = np.random.default_rng(np.random.SeedSequence([int(args.seed), 0]))
    if args.mu_kpa is not None:
        spec = phantomgen.PhantomSpec(float(args.mu_kpa), [], cfg.force_fraction, args.seed)
    else:
        spec = phantomgen.sample_phantom_spec(rng, cfg, kind=args.kind, seed=args.seed)
    spec.force_fraction = cfg.force_fraction
    phantom, labels = phantomgen.rasterize_phantom(spec, cfg)
    push = ARFPush(focus=cfg.focus_mm, intensity_fraction=cfg.force_fraction)
    wave = simulate(phantom, push, total_time_ms=cfg.total_time_ms, boundary=cfg.boundary,
                    record_every_us=args.record_every_us)
    seq = extract_roi_frames(wave, cfg.roi_mm, cfg.out_shape, cfg.frame_rate_hz, cfg.n_frames)
    raw_peak = float(np.abs(seq.frames).max())
    seq, amplitude = calibrate_amplitude(seq, push, cfg.target_peak_um)
    if args.save_wavefield:
        wave.u = wave.u * (float(np.abs(seq.frames).max()) / raw_peak if raw_peak else 1.0)
        wave.export(out / "wavefield.f32")
    binio.write_array_with_sidecar(out / "disp.f32", seq.frames, units="um",
                                   frame_rate_hz=seq.frame_rate_hz,
                                   pixel_spacing_mm=list(seq.pixel_spacing_mm), t0_ms=seq.t0_ms)
    binio.write_array_with_sidecar(out / "mask.f32", labels.mask)
    binio.write_array_with_sidecar(out / "modulus.f32", labels.modulus_kpa, units="kPa")
    summary = {"spec": spec.to_dict(), "calibrated_amplitude": amplitude,
               "peak_um": float(np.abs(seq.frames).max())}
    if not spec.inclusions:
        summary["wavefront_speed_m_s"] = wavefront_speed(wave)
        summary["expected_speed_m_s"] = float(np.sqrt(spec.background_kpa * 1e3 / cfg.rho))
    binio.write_json(out / "summary.json", summary)
    write_snapshot(out, args, gen=cfg, options={"kind": args.kind, "mu_kpa": args.mu_kpa,
                                                "record_every_us": args.record_every_us})
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_gendata(args):
    file_cfg, ov = _resolve_common(args, ("gen",))
    cfg = _gen_config(args, file_cfg, ov)
    args.out = _default_root(args.out, "--out")
    out = _out_dir(args, fresh_marker="manifest.json")
    count = args.count if args.count is not None else file_cfg.get("count")
    samples = phantomgen.generate_dataset(cfg, args.seed, count, n_jobs=args.jobs)
    manifest = phantomgen.write_dataset(samples, out, cfg, args.seed)
    write_snapshot(out, args, gen=cfg, options={"count": count})
    counts = {s: len(manifest.split(s)) for s in phantomgen.SPLITS}
    print(f"wrote {len(samples)} samples to {out} ({counts})")


def cmd_train(args):
    from shearnet.training import train

    file_cfg, ov = _resolve_common(args, ("model", "train"))
    data_root = _default_root(args.data, "--data")
    ds = phantomgen.read_dataset(data_root)
    _set_fixed_precision(args)
    n_frames = ds.config.n_frames if ds.config else ds.load(ds.ids()[0], "disp").shape[0]
    model_cfg = ModelConfig(**_section(file_cfg, ov, "model", {"t_d": n_frames}))
    tvals = {"seed": args.seed, **_section(file_cfg, ov, "train")}
    for flag in ("epochs", "batch_size", "alpha", "lr0"):
        if getattr(args, flag) is not None:
            tvals[flag] = getattr(args, flag)
    train_cfg = TrainConfig(**tvals)
    out = _out_dir(args)
    write_snapshot(out, args, inputs={"data": data_root, "resume": args.resume},
                   model=model_cfg, train=train_cfg)

    def progress(rec):
        print(f"epoch {rec['epoch']:4d}  train {rec['train_loss']:.5g}  val {rec['val_loss']:.5g}"
              f"  dsc {rec['val_dsc']:.3f}  psnr {rec['val_psnr']:.2f}", flush=True)

    _, history = train(ds.arrays("train"), ds.arrays("val"), model_cfg, train_cfg,
                       out_dir=out, resume_from=args.resume, progress=progress)
    print(f"checkpoints in {out} ({history.wall_clock_s:.1f} s)")


def cmd_eval(args):
    file_cfg, _ = _resolve_common(args, ())
    data_root = _default_root(args.data, "--data")
    ds = phantomgen.read_dataset(data_root)
    digits = _set_fixed_precision(args)
    sources = [args.checkpoint is not None, args.predictions is not None, args.gt_as_prediction]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --checkpoint, --predictions, --gt-as-prediction")
    if args.checkpoint:
        ckpt = _resolve_checkpoint(args.checkpoint)
        net = load_checkpoint(ckpt)
        reports = evaluation.evaluate_model(net, ds, args.split, args.threshold)
        method = "shear-net"
    elif args.predictions:
        meta, _ = evaluation.read_predictions(args.predictions)
        reports = evaluation.evaluate_predictions(args.predictions, ds, args.split, args.threshold)
        method = meta.get("method", "unknown")
    else:
        reports = evaluation.evaluate_ground_truth(ds, args.split)
        method = "ground-truth"
    out = _out_dir(args)
    agg = metrics.write_reports(reports, out / "metrics.csv", out / "aggregate.json",
                                extra={"method": method, "split": args.split}, digits=digits)
    write_snapshot(out, args, inputs={"data": data_root, "checkpoint": args.checkpoint,
                                      "predictions": args.predictions},
                   options={"split": args.split, "threshold": args.threshold,
                            "method": method, "fixed_precision": bool(digits)})
    print(metrics.format_table(agg, f"{method} on {args.split}"))


def cmd_baseline(args):
    _resolve_common(args, ())
    data_root = _default_root(args.data, "--data")
    ds = phantomgen.read_dataset(data_root)
    digits = _set_fixed_precision(args)
    reports, preds, runtimes = evaluation.run_baseline(ds, args.split, args.half_window,
                                                       args.min_peak_um, args.distance)
    out = _out_dir(args)
    from shearnet.baseline_tof import METHOD_LABEL
    evaluation.write_predictions(out / "predictions", preds, METHOD_LABEL,
                                 {"runtime_s": runtimes})
    agg = metrics.write_reports(reports, out / "metrics.csv", out / "aggregate.json",
                                extra={"method": METHOD_LABEL, "split": args.split}, digits=digits)
    write_snapshot(out, args, inputs={"data": data_root},
                   options={"split": args.split, "half_window_px": args.half_window,
                            "min_peak_um": args.min_peak_um, "distance": args.distance})
    print(metrics.format_table(agg, f"{METHOD_LABEL} on {args.split}"))


def plot_panels(panels, path, title=None):
    """Save gold-standard/reconstruction panels with one shared colour scale.

    ``panels`` is a list of rows, each a list of ``(label, image_kpa)``. The
    scale runs from 0 to the largest value in the figure. Returns ``(vmin, vmax)``.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    vmax = max(float(np.max(img)) for row in panels for _, img in row)
    vmax = vmax if vmax > 0 else 1.0
    nrows, ncols = len(panels), max(len(r) for r in panels)
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols + 1.0, 3.6 * nrows),
                             squeeze=False, constrained_layout=True)
    im = None
    for r, row in enumerate(panels):
        for c in range(ncols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c >= len(row):
                ax.axis("off")
                continue
            label, img = row[c]
            im = ax.imshow(img, cmap="viridis", vmin=0.0, vmax=vmax, interpolation="nearest")
            ax.set_title(label, fontsize=8)
    fig.colorbar(im, ax=axes, label="shear modulus [kPa]", shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return 0.0, vmax


def cmd_plot(args):
    _resolve_common(args, ())
    data_root = _default_root(args.data, "--data")
    ds = phantomgen.read_dataset(data_root)
    ids = args.sample or ds.ids(args.split)[:4]
    missing = [i for i in ids if i not in ds.ids()]
    if missing:
        raise phantomgen.DatasetError(f"unknown sample ids {missing}")
    net = load_checkpoint(_resolve_checkpoint(args.checkpoint)) if args.checkpoint else None
    preds = evaluation.read_predictions(args.predictions)[1] if args.predictions else None
    panels = []
    for sid in ids:
        row = [(f"{sid} gold standard", ds.load(sid, "modulus"))]
        if net is not None:
            _, mod, _ = evaluation.predict_model(net, ds.load(sid, "disp"))
            row.append((f"{sid} SHEAR-net", np.clip(mod, 0, None)))
        if preds is not None:
            row.append((f"{sid} predictions", np.clip(preds[sid]["modulus"], 0, None)))
        panels.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vmin, vmax = plot_panels(panels, out)
    write_snapshot(out.parent, args, inputs={"data": data_root, "checkpoint": args.checkpoint,
                                             "predictions": args.predictions},
                   options={"samples": ids, "vmin": vmin, "vmax": vmax, "figure": out.name})
    print(f"wrote {out} (colour scale {vmin:g} to {vmax:g} kPa)")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="shearnet", description="Shear-wave elastography reconstruction pipeline.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config (e.g. a previous run_config.json)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(phantomgen.PRESETS))
        sp.add_argument("--out", required=out_required)
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    sp = sub.add_parser("simulate", help="simulate a single phantom")
    common(sp)
    sp.add_argument("--kind", choices=phantomgen.KINDS)
    sp.add_argument("--mu-kpa", type=float, help="homogeneous phantom with this modulus")
    sp.add_argument("--force-fraction", type=float)
    sp.add_argument("--record-every-us", type=float, default=50.0)
    sp.add_argument("--save-wavefield", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gendata", help="generate a dataset")
    common(sp, out_required=False)
    sp.add_argument("--count", type=int)
    sp.add_argument("--force-fraction", type=float)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_gendata)

    sp = sub.add_parser("train", help="train SHEAR-net on a dataset")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--resume", help="checkpoint directory to resume from")
    sp.add_argument("--fixed-precision", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score reconstructions on a dataset split")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=phantomgen.SPLITS)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions")
    sp.add_argument("--gt-as-prediction", action="store_true")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--fixed-precision", action="store_true",
                    help="round CSV values and omit wall-clock columns")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="time-of-flight reconstruction and scores")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=phantomgen.SPLITS)
    sp.add_argument("--half-window", type=int, default=4)
    sp.add_argument("--min-peak-um", type=float, default=0.5)
    sp.add_argument("--distance", choices=("radial", "lateral"), default="radial")
    sp.add_argument("--fixed-precision", action="store_true")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("plot", help="gold standard vs reconstruction figure (PNG)")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--split", default="test", choices=phantomgen.SPLITS)
    sp.add_argument("--sample", action="append", help="sample id (repeatable)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required (simulate, gendata, train, eval, baseline, plot)")
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, SimulationError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

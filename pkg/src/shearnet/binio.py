"""Little-endian float32 array files with JSON metadata.

Every array the package persists (dataset samples, checkpoints, raw wave
fields, baseline images) is a headerless C-order ``<f4`` blob; shapes live in
the accompanying JSON.
"""
import json
import os
import subprocess
import tempfile
from pathlib import Path

import numpy as np

DTYPE = np.dtype("<f4")


class ArrayFileError(IOError):
    """A stored array is missing or does not match its declared shape."""


def write_array(path, arr):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(arr, dtype=DTYPE).tofile(path)


def read_array(path, shape):
    path = Path(path)
    if not path.exists():
        raise ArrayFileError(f"missing array file: {path}")
    expected = int(np.prod(shape)) * DTYPE.itemsize
    size = path.stat().st_size
    if size != expected:
        raise ArrayFileError(
            f"{path}: {size} bytes on disk, expected {expected} for shape {tuple(shape)}"
        )
    return np.fromfile(path, dtype=DTYPE).reshape(shape)


def write_json(path, obj):
    """Write JSON atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_array_with_sidecar(path, arr, **meta):
    """Write ``arr`` and a ``<path>.json`` sidecar holding its shape plus ``meta``."""
    path = Path(path)
    write_array(path, arr)
    write_json(path.with_suffix(path.suffix + ".json"), {"shape": list(np.shape(arr)), **meta})


def read_array_with_sidecar(path):
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise ArrayFileError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    return read_array(path, tuple(meta["shape"])), meta


def code_version():
    """Package version plus ``git describe`` of the source tree when available."""
    from shearnet import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__

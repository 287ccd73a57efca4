"""File I/O helpers: images, CSV float maps, run manifests, hashing."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(img, path) -> None:
    """8-bit PNG, row-major, top-left origin; grayscale for 2-D input."""
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def read_png(path) -> np.ndarray:
    """Image as float array in [0, 1]."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_ppm(img, path) -> None:
    """ASCII P3, row-major, top-left origin."""
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    h, w, _ = arr.shape
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in arr.reshape(h, -1):
            fh.write(" ".join(str(v) for v in row))
            fh.write("\n")


def write_csv_matrix(mat, path) -> None:
    """Row-major float CSV used for the per-pixel metric maps."""
    mat = np.asarray(mat, dtype=np.float64)
    with open(path, "w") as fh:
        for row in np.atleast_2d(mat):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_csv_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def false_color(values) -> np.ndarray:
    """Blue->cyan->yellow->red heat map over the value range of the input."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    t = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    stops = np.array([
        [0.05, 0.03, 0.35],
        [0.02, 0.55, 0.85],
        [0.95, 0.90, 0.10],
        [0.85, 0.08, 0.06],
    ])
    pos = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    out = np.empty(t.shape + (3,))
    for c in range(3):
        out[..., c] = np.interp(t, pos, stops[:, c])
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    """sha256 of the canonical JSON encoding of a config-like object."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed, inputs: dict,
                   outputs: list, timings: dict, extra: dict | None = None) -> dict:
    """Run manifest: config hash, seed, versions, input hashes, outputs, timings.

    Input hashes let a later `verify` run detect changed inputs; timings are
    informational and excluded from reproducibility comparisons.
    """
    import numba

    from . import __version__

    manifest = {
        "command": command,
        "config": config,
        "config_hash": canonical_hash(config),
        "seed": seed,
        "versions": {
            "uncfield": __version__,
            "numpy": np.__version__,
            "numba": numba.__version__,
        },
        "inputs": {str(k): sha256_file(v) for k, v in inputs.items()},
        "outputs": sorted(str(p) for p in outputs),
        "timings": timings,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)

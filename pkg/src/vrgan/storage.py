"""On-disk formats: 16-bit PNG rasters, split metadata CSVs and JSON manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError

PNG_RANGE = (-2.0, 2.0)
SPLITS = ("train", "val", "test")
METADATA_COLUMNS = ("filename", "y", "y_prime", "gt_filename", "seed_index")
MANIFEST_NAME = "manifest.json"


def encode_png16(values: np.ndarray) -> np.ndarray:
    """Map intensities in [-2, 2] to uint16 via ``round((v + 2) / 4 * 65535)``."""
    lo, hi = PNG_RANGE
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return np.floor((v - lo) / (hi - lo) * 65535 + 0.5).astype(np.uint16)


def decode_png16(codes: np.ndarray) -> np.ndarray:
    lo, hi = PNG_RANGE
    return np.asarray(codes, dtype=np.float64) / 65535 * (hi - lo) + lo


def write_png16(path, values):
    Image.fromarray(encode_png16(values)).save(path)


def read_png16(path) -> np.ndarray:
    return decode_png16(np.asarray(Image.open(path)))


def read_grayscale(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale image as raw float64 intensities."""
    img = Image.open(path)
    if img.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64)


def write_png8(path, values01):
    """Write a [0, 1] raster as 8-bit grayscale, clipping out-of-range values."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.floor(v * 255 + 0.5).astype(np.uint8)).save(path)


def content_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metadata_csv(path, rows, columns=METADATA_COLUMNS):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_metadata_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# toy dataset layout


def write_toy_dataset(out_dir, cfg, splits=None) -> dict:
    """Write every split of a toy dataset plus the dataset manifest.

    Returns the manifest dictionary.
    """
    from .toydata import gen_toy_dataset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = splits or gen_toy_dataset(cfg)
    counts = {}
    for name in SPLITS:
        split = splits[name]
        d = out / name
        d.mkdir(exist_ok=True)
        rows = []
        for item, seed_index in zip(split, split.seed_indices()):
            fname = f"{seed_index:06d}.png"
            if split.is_pairs:
                gt_name = f"{seed_index:06d}_gt.png"
                write_png16(d / fname, item.sample.image)
                write_png16(d / gt_name, item.gt_map)
                rows.append(dict(filename=fname, y=item.sample.y, y_prime=item.y_prime,
                                 gt_filename=gt_name, seed_index=seed_index))
            else:
                write_png16(d / fname, item.image)
                rows.append(dict(filename=fname, y=item.y, seed_index=seed_index))
        write_metadata_csv(d / "metadata.csv", rows)
        counts[name] = len(rows)
    manifest = {
        "kind": "toy",
        "config": cfg.to_dict(),
        "config_hash": content_hash(cfg.to_dict()),
        "counts": counts,
    }
    write_json(out / MANIFEST_NAME, manifest)
    return manifest


def read_dataset_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = read_json(path)
    if content_hash(manifest["config"]) != manifest.get("config_hash"):
        raise ConfigurationError(f"dataset manifest hash mismatch in {path}")
    return manifest


def load_split_arrays(dataset_dir, split: str, dtype=np.float32):
    """Load a split written by :func:`write_toy_dataset` (or the paired x-ray layout).

    Returns ``(images, y, y_prime, gt_maps)`` with ``None`` for the fields a
    training split does not carry.
    """
    d = Path(dataset_dir) / split
    rows = read_metadata_csv(d / "metadata.csv")
    if not rows:
        return np.empty((0, 0, 0), dtype=dtype), np.empty(0), None, None
    images = np.stack([read_png16(d / r["filename"]) for r in rows]).astype(dtype)
    y = np.array([float(r["y"]) for r in rows])
    if not rows[0]["y_prime"]:
        return images, y, None, None
    y_prime = np.array([float(r["y_prime"]) for r in rows])
    gt = np.stack([read_png16(d / r["gt_filename"]) for r in rows]).astype(dtype)
    return images, y, y_prime, gt

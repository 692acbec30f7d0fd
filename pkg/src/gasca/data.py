"""Paired (input, target) image datasets.

Sources:

* IDX files (u8, rank 3, big-endian header, magic 00 00 08 03)
* raw u8 pixel dumps of known geometry
* a synthetic pose set: random asymmetric blobs, input rotated by up to
  ``max_angle_deg`` and target at 0 degrees

A manifest is a flat ``key=value`` file that fully determines a dataset and
its train/validation split.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .core import SeededRng, ShapeError, Tensor, as_tensor

IDX_MAGIC = b"\x00\x00\x08\x03"


class DataFormatError(ValueError):
    pass


@dataclass
class PairedDataset:
    inputs: Tensor
    targets: Tensor
    split: str = "train"
    check_range: bool = True

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs)
        self.targets = as_tensor(self.targets)
        if self.inputs.shape != self.targets.shape:
            raise ShapeError(f"inputs {self.inputs.shape} and targets {self.targets.shape} differ")
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise ShapeError(f"expected a non-empty N x C x H x W batch, got {self.inputs.shape}")
        if self.split not in ("train", "validation"):
            raise ValueError(f"unknown split tag {self.split!r}")
        if self.check_range:
            for name, t in (("inputs", self.inputs), ("targets", self.targets)):
                if t.min() < 0.0 or t.max() > 1.0:
                    raise ValueError(f"{name} pixels must lie in [0, 1]")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, split: Optional[str] = None) -> "PairedDataset":
        return PairedDataset(self.inputs[idx], self.targets[idx], split or self.split, self.check_range)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    """Return the raw u8 array (N, H, W) stored in an IDX image file."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataFormatError(f"{path}: truncated IDX header at byte offset {len(data)}")
    if data[:4] != IDX_MAGIC:
        raise DataFormatError(f"{path}: bad IDX magic {data[:4].hex()} at byte offset 0 (expected {IDX_MAGIC.hex()})")
    if len(data) < 16:
        raise DataFormatError(f"{path}: truncated IDX dimensions at byte offset {len(data)}")
    n, h, w = struct.unpack(">III", data[4:16])
    expected = 16 + n * h * w
    if len(data) < expected:
        raise DataFormatError(f"{path}: truncated pixel data at byte offset {len(data)} (expected {expected} bytes)")
    if len(data) > expected:
        raise DataFormatError(f"{path}: {len(data) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, h, w)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError(f"expected a u8 array of shape (N, H, W), got {images.dtype} {images.shape}")
    atomic_write(path, IDX_MAGIC + struct.pack(">III", *images.shape) + images.tobytes())


def _pair(pixels: np.ndarray, pairing: Union[str, Sequence[int]]) -> tuple:
    x = pixels.astype(np.float64)[:, None] / 255.0
    if isinstance(pairing, str):
        if pairing != "self":
            raise ValueError(f"unknown pairing {pairing!r}")
        return x, x.copy()
    target_map = np.asarray(pairing, dtype=np.int64)
    if target_map.shape != (x.shape[0],) or target_map.min() < 0 or target_map.max() >= x.shape[0]:
        raise ValueError(f"target map must give one valid index per image ({x.shape[0]} images)")
    return x, x[target_map]


def load_idx(images_path, pairing: Union[str, Sequence[int]] = "self") -> PairedDataset:
    """Load an IDX image file; ``pairing`` is "self" or a per-image target index list."""
    inputs, targets = _pair(read_idx_images(images_path), pairing)
    return PairedDataset(inputs, targets)


def load_raw(images_path, n: int, height: int, width: int, targets_path=None) -> PairedDataset:
    """Headerless u8 pixel dumps; targets default to the inputs themselves."""
    def read(path):
        data = Path(path).read_bytes()
        if len(data) != n * height * width:
            raise DataFormatError(f"{path}: expected {n * height * width} bytes, found {len(data)}")
        return np.frombuffer(data, dtype=np.uint8).reshape(n, 1, height, width).astype(np.float64) / 255.0
    x = read(images_path)
    t = read(targets_path) if targets_path else x.copy()
    return PairedDataset(x, t)


# ---------------------------------------------------------------------------
# synthetic pose dataset
# ---------------------------------------------------------------------------

# Canonical pose template: the upright orientation of every shape is fixed by
# these harmonic phases and light direction, so 0 degrees is recognisable from
# a rotated sample. Per-sample variation is in amplitudes, size and jitter.
_TEMPLATE_PHASES = np.array([0.5, 2.0, 4.0])
_TEMPLATE_LIGHT = math.pi / 4
_PHASE_JITTER = 0.25


def _render_blob(size: int, rng: SeededRng) -> np.ndarray:
    """An anti-aliased asymmetric blob, shaded by a linear ramp, centred in the frame."""
    centre = (size - 1) / 2.0
    # keep the blob inside the inscribed circle so rotations never clip it
    r_max = 0.45 * size
    base = rng.uniform(0.22, 0.30) * size
    harmonics = len(_TEMPLATE_PHASES)
    amps = rng.uniform(0.08, 0.22, size=harmonics) * base
    phases = _TEMPLATE_PHASES + rng.uniform(-_PHASE_JITTER, _PHASE_JITTER, size=harmonics)
    orders = np.arange(1, harmonics + 1)
    ramp_dir = _TEMPLATE_LIGHT + rng.uniform(-_PHASE_JITTER, _PHASE_JITTER)
    lo, hi = rng.uniform(0.35, 0.6), rng.uniform(0.8, 1.0)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - centre, xx - centre
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    edge = base + np.sum(amps[:, None, None] * np.cos(orders[:, None, None] * theta + phases[:, None, None]), axis=0)
    edge = np.minimum(edge, r_max)
    coverage = np.clip(edge - r + 0.5, 0.0, 1.0)
    proj = (dx * math.cos(ramp_dir) + dy * math.sin(ramp_dir)) / (size / 2.0)
    shade = lo + (hi - lo) * np.clip(0.5 + 0.5 * proj, 0.0, 1.0)
    return coverage * shade


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling, zero fill.

    Positive angles turn the picture clockwise as displayed (row 0 on top).
    """
    size_y, size_x = img.shape
    cy, cx = (size_y - 1) / 2.0, (size_x - 1) / 2.0
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    yy, xx = np.mgrid[0:size_y, 0:size_x].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel samples the source at the rotated-back position
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    out = ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def synth_pose_dataset(n: int, image_size: int, max_angle_deg: float = 60.0,
                       rng: Optional[SeededRng] = None, seed: int = 0) -> PairedDataset:
    """Rotated blobs as inputs, the same blob at 0 degrees as targets.

    Shapes are drawn first and angles afterwards, so two calls with the same
    seed and different ``max_angle_deg`` share their base shapes.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if max_angle_deg < 0:
        raise ValueError(f"max_angle_deg must be non-negative, got {max_angle_deg}")
    rng = rng if rng is not None else SeededRng(seed)
    targets = np.stack([_render_blob(image_size, rng) for _ in range(n)])
    unit = rng.uniform(-1.0, 1.0, size=n)
    inputs = np.stack([rotate_image(t, u * max_angle_deg) for t, u in zip(targets, unit)])
    return PairedDataset(inputs[:, None], targets[:, None])


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

def split(ds: PairedDataset, val_fraction: float, rng: SeededRng):
    """Seeded disjoint train/validation split; returns (train, validation, (train_idx, val_idx))."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie strictly between 0 and 1, got {val_fraction}")
    n = len(ds)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"val_fraction={val_fraction} leaves an empty split for {n} samples")
    perm = rng.permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "validation"), (train_idx, val_idx)


def iterate_batches(n: int, batch_size: int, rng: SeededRng):
    """Index arrays of one shuffled epoch; the last batch may be short."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def parse_key_values(text: str, source: str = "<config>") -> dict:
    """``key=value`` lines; blank lines and ``#`` comments ignored; duplicates rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_key_values(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


_MANIFEST_KEYS = {
    "synthetic": {"source", "n", "image_size", "max_angle_deg", "seed", "val_fraction", "normalization"},
    "idx": {"source", "images_path", "pairing", "seed", "val_fraction", "normalization"},
    "raw-binary": {"source", "images_path", "targets_path", "n", "height", "width", "seed",
                   "val_fraction", "normalization"},
}


@dataclass
class DatasetManifest:
    source: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    val_fraction: float = 0.2
    base_dir: Path = Path(".")

    @property
    def normalization(self) -> str:
        return self.params.get("normalization", "none" if self.source == "synthetic" else "u8/255")

    @classmethod
    def from_dict(cls, values: dict, base_dir=".") -> "DatasetManifest":
        values = dict(values)
        source = values.get("source")
        if source not in _MANIFEST_KEYS:
            raise ValueError(f"manifest: unknown or missing source {source!r}")
        unknown = sorted(set(values) - _MANIFEST_KEYS[source])
        if unknown:
            raise ValueError(f"manifest: unknown key {unknown[0]!r} for source {source}")
        seed = int(values.pop("seed", 0))
        val_fraction = float(values.pop("val_fraction", 0.2))
        values.pop("source")
        return cls(source, values, seed, val_fraction, Path(base_dir))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(parse_key_values(path.read_text(), str(path)), path.parent)

    def to_dict(self) -> dict:
        return {"source": self.source, **self.params, "seed": str(self.seed), "val_fraction": repr(self.val_fraction)}

    def save(self, path) -> None:
        atomic_write(path, format_key_values(self.to_dict()).encode())

    def _path(self, key):
        p = Path(self.params[key])
        return p if p.is_absolute() else self.base_dir / p

    def build(self) -> PairedDataset:
        p = self.params
        if self.source == "synthetic":
            return synth_pose_dataset(int(p.get("n", 512)), int(p.get("image_size", 16)),
                                      float(p.get("max_angle_deg", 60.0)), SeededRng(self.seed))
        if self.source == "idx":
            pairing = p.get("pairing", "self")
            if pairing != "self":
                pairing = [int(v) for v in pairing.split(",")]
            return load_idx(self._path("images_path"), pairing)
        targets = self._path("targets_path") if "targets_path" in p else None
        return load_raw(self._path("images_path"), int(p["n"]), int(p["height"]), int(p["width"]), targets)

    def build_split(self):
        """(train, validation) with a split seeded independently of dataset generation."""
        ds = self.build()
        train, val, _ = split(ds, self.val_fraction, SeededRng((self.seed + 1) % 2**64))
        return train, val


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()

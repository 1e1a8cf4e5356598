"""Image datasets: synthetic shapes, packed binary files and PNG/PPM folders.

Packed binary layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MIMDATA\\0"
    8       4     u32 format version (1)
    12      16    u32 n, c, h, w
    28      4     u32 has_labels (0 or 1)
    32      n*c*h*w   u8 pixels, NCHW row-major (value / 255 = intensity)
    ...     4*n   i32 labels, present iff has_labels
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PACKED_MAGIC = b"MIMDATA\0"
PACKED_VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")


class DatasetFormatError(ValueError):
    """Corrupt, truncated or inconsistent dataset file."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    class_names: list | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, c, h, w], got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if self.labels is not None and len(self.labels) else 0

    def subset(self, indices, **provenance) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.class_names, {**self.provenance, **provenance})

    def class_histogram(self) -> dict:
        if self.labels is None:
            return {}
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.images.tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()


# -- synthetic shapes ------------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "ring", "cross", "bar")


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        return (v <= r * 0.7) & (v >= -r + 1.7 * np.abs(u))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    return (np.abs(u) <= r) & (np.abs(v) <= r * 0.35)


def _hsv(h, s, v) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def gen_synthetic(n: int, classes: int = 4, image_size: int = 32, seed: int = 0) -> Dataset:
    """Class-conditional colored shapes on noisy backgrounds.

    Class ``k`` fixes a shape type and a color family; each image jitters the
    position, size, rotation, hue and the background. Pixels are quantized to
    multiples of 1/255 so the packed format round-trips exactly.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5
    hue_centers = (np.arange(classes) * 0.61803398875) % 1.0
    s = image_size / 32.0
    images = np.empty((n, 3, image_size, image_size))
    for i, k in enumerate(labels):
        kind = SHAPES[k % len(SHAPES)]
        bg_level = rng.uniform(0.15, 0.55)
        bg_tint = rng.uniform(-0.08, 0.08, size=3)
        grad = rng.normal(0.0, 0.1, size=2)
        base = bg_level + grad[0] * (yy / image_size - 0.5) + grad[1] * (xx / image_size - 0.5)
        img = base[None] + bg_tint[:, None, None] + rng.normal(0.0, 0.04, size=(3, image_size, image_size))
        r = rng.uniform(7.0, 11.0) * s
        cy, cx = rng.uniform(image_size * 0.5 - 5 * s, image_size * 0.5 + 5 * s, size=2)
        region = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, np.pi))
        color = _hsv((hue_centers[k] + rng.uniform(-0.04, 0.04)) % 1.0, rng.uniform(0.6, 1.0),
                     rng.uniform(0.65, 1.0))
        shade = color[:, None, None] * (1.0 + rng.normal(0.0, 0.03, size=(1, image_size, image_size)))
        img = np.where(region[None], shade, img)
        images[i] = img
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    names = [f"{SHAPES[k % len(SHAPES)]}-{k}" for k in range(classes)]
    return Dataset(images, labels, names,
                   {"source": "synthetic", "n": n, "classes": classes, "image_size": image_size, "seed": seed})


def parse_synthetic_spec(spec: str) -> dict:
    """``synthetic:n=512,classes=4,image_size=32,seed=0`` -> keyword dict."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    out = {}
    for item in filter(None, body.split(",")):
        key, _, value = item.partition("=")
        out[key.strip()] = int(value)
    return out


# -- packed binary ---------------------------------------------------------------

def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_packed(dataset: Dataset, path) -> None:
    n, c, h, w = dataset.images.shape
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    has_labels = dataset.labels is not None
    parts = [_HEADER.pack(PACKED_MAGIC, PACKED_VERSION, n, c, h, w, int(has_labels)), pixels.tobytes()]
    if has_labels:
        parts.append(dataset.labels.astype("<i4").tobytes())
    _atomic_write(path, b"".join(parts))


def load_packed(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: corrupt header (file is {len(raw)} bytes)")
    magic, version, n, c, h, w, has_labels = _HEADER.unpack_from(raw)
    if magic != PACKED_MAGIC:
        raise DatasetFormatError(f"{path}: corrupt header (bad magic {magic!r})")
    if version != PACKED_VERSION:
        raise DatasetFormatError(f"{path}: unsupported packed version {version}")
    n_pix = n * c * h * w
    expected = _HEADER.size + n_pix + (4 * n if has_labels else 0)
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: size mismatch, expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n_pix, offset=_HEADER.size)
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255.0
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + n_pix).astype(np.int64)
    return Dataset(images, labels, None, {"source": str(path), "format": "packed"})


# -- image folders ---------------------------------------------------------------

IMAGE_SUFFIXES = (".png", ".ppm")


def load_image_folder(path, require_labels: bool = False) -> Dataset:
    """PNG/PPM files in lexicographic order plus an optional ``labels.csv`` (filename,label)."""
    from PIL import Image

    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetFormatError(f"{root}: no PNG/PPM images found")
    arrays = []
    for f in files:
        with Image.open(f) as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{root}: images differ in size: {sorted(shapes)}")
    labels = None
    label_file = root / "labels.csv"
    if label_file.exists():
        with open(label_file, newline="") as fh:
            table = {row["filename"]: int(row["label"]) for row in csv.DictReader(fh)}
        missing = [f.name for f in files if f.name not in table]
        if missing:
            raise DatasetFormatError(f"{label_file}: no label for {missing[:3]}")
        labels = np.array([table[f.name] for f in files])
    elif require_labels:
        raise DatasetFormatError(f"{root}: labels.csv is required")
    return Dataset(np.stack(arrays), labels, None, {"source": str(root), "format": "folder"})


def load_dataset(path: str, format: str | None = None, require_labels: bool = False) -> Dataset:
    """Load from ``synthetic:...`` specs, packed ``.bin`` files or image folders."""
    path = str(path)
    fmt = format
    if fmt is None:
        if path.startswith("synthetic"):
            fmt = "synthetic"
        elif os.path.isdir(path):
            fmt = "folder"
        else:
            fmt = "packed"
    if fmt == "synthetic":
        ds = gen_synthetic(**parse_synthetic_spec(path))
    elif fmt == "folder":
        ds = load_image_folder(path, require_labels)
    elif fmt == "packed":
        ds = load_packed(path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if require_labels and ds.labels is None:
        raise DatasetFormatError(f"{path}: labels are required")
    return ds

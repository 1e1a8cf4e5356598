"""Checkpoint container and CSV/SVG outputs.

Checkpoint layout (little-endian)::

    offset  size  field
    0       8     magic b"MIMLCKPT"
    8       4     u32 format version (1)
    12      8     u64 header length H
    20      H     UTF-8 JSON header (configs, rng state, epoch, metrics, array table)
    20+H    ...   float64 array payloads, in array-table order
    end-32  32    SHA-256 of every preceding byte

Each array-table entry is ``{"group", "name", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the payload section.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .vit import ModelParams, ViTConfig

CHECKPOINT_MAGIC = b"MIMLCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

METRICS_HEADER = ["epoch", "loss", "distance_term", "constraint_term", "psnr", "lr"]
CURVE_HEADER = ["block", "ratio", "cka"]


class CheckpointError(ValueError):
    """Bad magic, unsupported version or checksum failure."""


@dataclass
class Checkpoint:
    vit_config: ViTConfig
    params: ModelParams
    target: ModelParams | None = None
    optimizer: dict | None = None
    train_config: dict | None = None
    rng_state: dict | None = None
    epoch: int = 0
    step: int = 0
    metrics: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise OSError(f"directory {path.parent} does not exist")
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _arrays(ckpt: Checkpoint):
    yield from (("params", k, t.data) for k, t in ckpt.params.items())
    if ckpt.target is not None:
        yield from (("target", k, t.data) for k, t in ckpt.target.items())
    if ckpt.optimizer is not None:
        for moment in ("m", "v"):
            yield from ((f"opt.{moment}", k, a) for k, a in ckpt.optimizer[moment].items())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for group, name, arr in _arrays(ckpt):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = {k: v for k, v in ckpt.optimizer.items() if k not in ("m", "v")}
    header = {
        "vit_config": ckpt.vit_config.to_dict(),
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "metrics": ckpt.metrics,
        "extra": ckpt.extra,
        "optimizer": opt_meta,
        "has_target": ckpt.target is not None,
        "arrays": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum failure")
    start = _PREFIX.size
    header = json.loads(body[start:start + head_len].decode("utf-8"))
    payload = start + head_len
    groups: dict[str, OrderedDict] = {}
    for entry in header["arrays"]:
        arr = np.frombuffer(body, dtype="<f8", count=entry["nbytes"] // 8,
                            offset=payload + entry["offset"]).reshape(entry["shape"]).astype(np.float64)
        groups.setdefault(entry["group"], OrderedDict())[entry["name"]] = arr
    cfg = ViTConfig(**header["vit_config"])
    params = ModelParams(cfg, OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in groups["params"].items()))
    target = None
    if header["has_target"]:
        target = ModelParams(cfg, OrderedDict((k, Tensor(v)) for k, v in groups["target"].items()))
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = dict(header["optimizer"])
        optimizer["m"] = groups.get("opt.m", OrderedDict())
        optimizer["v"] = groups.get("opt.v", OrderedDict())
    return Checkpoint(cfg, params, target, optimizer, header["train_config"], header["rng_state"],
                      header["epoch"], header["step"], header["metrics"], header["extra"])


# -- CSV -------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(value: str, integer: bool = False):
    if value == "":
        return None
    return int(value) if integer else float(value)


def metrics_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for rec in records:
        writer.writerow([_fmt(rec.get(k)) for k in METRICS_HEADER])
    return buf.getvalue()


def emit_metrics(log, path) -> None:
    """Write one CSV row per epoch with the columns in ``METRICS_HEADER``."""
    records = log.records if hasattr(log, "records") else log
    atomic_write_bytes(path, metrics_csv(records).encode("utf-8"))


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [{k: _parse(v, k == "epoch") for k, v in zip(header, row)} for row in reader]


def emit_curve(curve, path, svg_path=None) -> None:
    """Write ``block,ratio,cka`` rows and optionally an SVG line plot."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for i, block in enumerate(curve.blocks):
        for j, ratio in enumerate(curve.mask_ratios):
            writer.writerow([block, repr(float(ratio)), repr(float(curve.values[i, j]))])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    if svg_path is not None:
        atomic_write_bytes(svg_path, curve_svg(curve).encode("utf-8"))


def read_curve(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected curve header {header}")
        return [(int(b), float(r), float(c)) for b, r, c in reader]


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def curve_svg(curve, width: int = 480, height: int = 320) -> str:
    pad = 40
    ratios = np.asarray(curve.mask_ratios, dtype=float)
    lo, hi = float(ratios.min()), float(ratios.max())
    span = hi - lo if hi > lo else 1.0

    def xy(r, v):
        x = pad + (r - lo) / span * (width - 2 * pad)
        y = height - pad - v * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">mask ratio</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">CKA</text>']
    for i, block in enumerate(curve.blocks):
        color = _PALETTE[i % len(_PALETTE)]
        vals = [v if math.isfinite(v) else 0.0 for v in curve.values[i]]
        pts = " ".join(xy(r, v) for r, v in zip(ratios, vals))
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        lines.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="11" fill="{color}">'
                     f'block {block}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"

"""Readers and writers for the on-disk formats.

Images are binary PPM (P6) / PGM (P5); depth maps are raw little-endian
f32 behind a ``u32 width, u32 height`` header. Embeddings, metric
checkpoints and cluster models use small magic-tagged binary layouts.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ClusterModel,
    ConstraintSet,
    EmbeddingSet,
    Eye,
    FilterClass,
    HardLink,
    LinkSource,
    MetricModel,
    PatchRecord,
    SoftLink,
    Split,
)

EMBEDDING_MAGIC = b"TCEMB001"
METRIC_MAGIC = b"TCMET001"
CLUSTER_MAGIC = b"TCCLU001"


class FormatError(ValueError):
    pass


# -- images -----------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into an ``(H, W)`` or ``(H, W, 3)`` uint8 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported image magic {magic!r}")
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, m = int(width), int(height), int(maxval)
    if m > 255:
        raise FormatError(f"{path}: 16-bit PNM not supported")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=pos)
    if channels == 3:
        return data.reshape(h, w, 3).copy()
    return data.reshape(h, w).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise FormatError("PNM writer expects uint8 pixels")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write array of shape {pixels.shape} as PNM")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated depth header")
    w, h = struct.unpack("<II", buf[:8])
    if len(buf) != 8 + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} f32 values")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.tobytes())


# -- embeddings ---------------------------------------------------------------


def write_embeddings(path, emb: EmbeddingSet) -> None:
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQ", emb.n_patches, emb.dim))
        fh.write(emb.values.astype("<f4").tobytes())
        fh.write(emb.patch_ids.astype("<u8").tobytes())


def read_embeddings(path) -> EmbeddingSet:
    buf = Path(path).read_bytes()
    if buf[:8] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad embeddings magic")
    n, d = struct.unpack("<QQ", buf[8:24])
    expected = 24 + 4 * n * d + 8 * n
    if len(buf) != expected:
        raise FormatError(f"{path}: size {len(buf)} does not match header ({expected})")
    values = np.frombuffer(buf, dtype="<f4", count=n * d, offset=24).reshape(n, d)
    ids = np.frombuffer(buf, dtype="<u8", count=n, offset=24 + 4 * n * d)
    return EmbeddingSet(values.astype(np.float32), ids.astype(np.int64))


# -- metric checkpoint --------------------------------------------------------


def write_metric_model(path, model: MetricModel) -> None:
    hidden = 0 if model.hidden_weights is None else model.hidden_weights.shape[0]
    with open(path, "wb") as fh:
        fh.write(METRIC_MAGIC)
        fh.write(struct.pack("<QQQ", model.in_dim, model.out_dim, hidden))
        fh.write(struct.pack("<ddd", model.margin, model.learning_rate, model.weight_decay))
        if hidden:
            fh.write(model.hidden_weights.astype("<f4").tobytes())
            fh.write(model.hidden_bias.astype("<f4").tobytes())
        fh.write(model.weights.astype("<f4").tobytes())
        fh.write(model.bias.astype("<f4").tobytes())


def read_metric_model(path) -> MetricModel:
    buf = Path(path).read_bytes()
    if buf[:8] != METRIC_MAGIC:
        raise FormatError(f"{path}: bad metric checkpoint magic")
    in_dim, out_dim, hidden = struct.unpack("<QQQ", buf[8:32])
    margin, lr, wd = struct.unpack("<ddd", buf[32:56])
    pos = 56

    def take(count, shape):
        nonlocal pos
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        return arr.astype(np.float64)

    hw = hb = None
    width = in_dim
    if hidden:
        hw = take(hidden * in_dim, (hidden, in_dim))
        hb = take(hidden, (hidden,))
        width = hidden
    W = take(out_dim * width, (out_dim, width))
    b = take(out_dim, (out_dim,))
    return MetricModel(W, b, margin, lr, wd, hw, hb)


# -- cluster model --------------------------------------------------------------


def write_cluster_model(path, model: ClusterModel) -> None:
    k, d = model.centroids.shape
    with open(path, "wb") as fh:
        fh.write(CLUSTER_MAGIC)
        fh.write(struct.pack("<QQ", k, d))
        fh.write(np.asarray(model.centroids, dtype="<f8").tobytes())
        fh.write(struct.pack("<dQ", model.objective, model.iterations_run))


def read_cluster_centroids(path) -> tuple[np.ndarray, float, int]:
    buf = Path(path).read_bytes()
    if buf[:8] != CLUSTER_MAGIC:
        raise FormatError(f"{path}: bad cluster model magic")
    k, d = struct.unpack("<QQ", buf[8:24])
    centroids = np.frombuffer(buf, dtype="<f8", count=k * d, offset=24).reshape(k, d).copy()
    objective, iters = struct.unpack("<dQ", buf[24 + 8 * k * d : 24 + 8 * k * d + 16])
    return centroids, objective, iters


# -- CSV tables -----------------------------------------------------------------

PATCH_COLUMNS = [
    "patch_id",
    "image_id",
    "center_row",
    "center_col",
    "patch_size",
    "depth_mean",
    "site",
    "drive",
    "pose",
    "rsm_count",
    "eye",
    "filter_class",
    "split",
]


def write_patches(path, patches: Iterable[PatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PATCH_COLUMNS)
        for p in patches:
            writer.writerow(
                [
                    p.patch_id,
                    p.image_id,
                    p.center_row,
                    p.center_col,
                    p.patch_size,
                    repr(float(p.depth_mean)),
                    p.site,
                    p.drive,
                    p.pose,
                    p.rsm_count,
                    p.eye.value,
                    p.filter_class.value,
                    p.split.value,
                ]
            )


def read_patches(path) -> list[PatchRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                PatchRecord(
                    patch_id=int(row["patch_id"]),
                    image_id=int(row["image_id"]),
                    center_row=int(row["center_row"]),
                    center_col=int(row["center_col"]),
                    patch_size=int(row["patch_size"]),
                    depth_mean=float(row["depth_mean"]),
                    site=int(row["site"]),
                    drive=int(row["drive"]),
                    pose=int(row["pose"]),
                    rsm_count=int(row["rsm_count"]),
                    eye=Eye(row["eye"]),
                    filter_class=FilterClass(row["filter_class"]),
                    split=Split(row["split"]),
                )
            )
    return out


def write_constraints(path, constraints: ConstraintSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for h in constraints.hard_links:
            writer.writerow(["hard", h.a, h.b, h.source.value])
        for s in constraints.soft_links:
            writer.writerow(["soft", s.a, s.b, repr(float(s.confidence))])
        for c in constraints.cannot_links:
            writer.writerow(["cannot", c.a, c.b, repr(float(c.confidence))])


def read_constraints(path) -> ConstraintSet:
    hard, soft, cannot = [], [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            kind, a, b, last = row
            if kind == "hard":
                hard.append(HardLink(int(a), int(b), LinkSource(last)))
            elif kind == "soft":
                soft.append(SoftLink(int(a), int(b), float(last)))
            elif kind == "cannot":
                cannot.append(SoftLink(int(a), int(b), float(last)))
            else:
                raise FormatError(f"{path}:{lineno}: unknown constraint kind {kind!r}")
    return ConstraintSet.build(hard, soft, cannot)


def write_labels(path, patch_ids: Sequence[int], labels: Sequence[int], column: str = "label") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", column])
        for pid, lab in zip(patch_ids, labels):
            writer.writerow([int(pid), int(lab)])


def read_labels(path) -> dict[int, int]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(r[0]): int(r[1]) for r in reader if r}

"""Datasets for the desk-scale harness: procedural shapes, IDX files, stratified subsets."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIXEL_NOISE = 0.2  # pixel noise sigma at difficulty 1

SHAPES = ("disk", "ring", "square", "frame", "plus", "cross", "hbars", "triangle")


class IdxError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int
    provenance: str

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        missing = sorted(set(range(self.classes)) - set(self.labels.tolist()))
        if missing:
            raise ValueError(f"classes {missing} have no examples")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[1:])

    def of_class(self, k: int) -> np.ndarray:
        return self.inputs[self.labels == k]


# --------------------------------------------------------------------------
# procedural shapes


def _shape_mask(kind, u, v, size, soft):
    """Soft mask of `kind` in the rotated, centred coordinates (u, v)."""

    def edge(dist):
        # dist < 0 inside, > 0 outside
        return np.clip(0.5 - dist / soft, 0.0, 1.0)

    r = np.hypot(u, v)
    cheb = np.maximum(np.abs(u), np.abs(v))
    t = 0.22 * size
    if kind == "disk":
        return edge(r - size)
    if kind == "ring":
        return edge(np.abs(r - 0.75 * size) - t)
    if kind == "square":
        return edge(cheb - 0.85 * size)
    if kind == "frame":
        return edge(np.abs(cheb - 0.75 * size) - t)
    if kind == "plus":
        arm = np.minimum(np.abs(u), np.abs(v))
        return edge(np.maximum(arm - t, cheb - size))
    if kind == "cross":
        a, b = (u + v) / math.sqrt(2), (u - v) / math.sqrt(2)
        arm = np.minimum(np.abs(a), np.abs(b))
        return edge(np.maximum(arm - t, np.maximum(np.abs(a), np.abs(b)) - size))
    if kind == "hbars":
        inside = cheb - size
        stripes = np.abs(((v / size) * 1.5) % 1.0 - 0.5) * size / 1.5 - 0.18 * size
        return edge(np.maximum(inside, stripes))
    if kind == "triangle":
        # upward triangle: three half-planes
        d1 = -v - 0.5 * size
        d2 = (math.sqrt(3) * u + v) / 2 - 0.5 * size
        d3 = (-math.sqrt(3) * u + v) / 2 - 0.5 * size
        return edge(np.maximum(np.maximum(d1, d2), d3) * 1.4)
    raise ValueError(kind)


def _render(kind, shape, difficulty, rng):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    span = min(h, w)
    d = difficulty
    cy += rng.uniform(-1, 1) * d * 0.2 * span
    cx += rng.uniform(-1, 1) * d * 0.2 * span
    size = 0.3 * span * (1 + rng.uniform(-1, 1) * 0.35 * d)
    angle = rng.uniform(-1, 1) * d * math.radians(25)
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * (xx - cx) + sa * (yy - cy)
    v = -sa * (xx - cx) + ca * (yy - cy)
    mask = _shape_mask(kind, u, v, size, soft=1.0)

    contrast = 1 - rng.uniform(0, 0.6) * d
    background = rng.uniform(0, 0.35) * d
    img = background + (contrast - background) * mask
    if d > 0:
        # linear illumination gradient, random clutter blobs, pixel noise
        gx, gy = rng.normal(0, 0.15 * d, 2)
        img = img + gx * (xx - cx) / span + gy * (yy - cy) / span
        for _ in range(rng.poisson(3 * d)):
            by, bx = rng.uniform(0, h), rng.uniform(0, w)
            br = 1.0 + rng.uniform(0, max(0.0, 0.12 * span - 1.0))
            img = img + rng.uniform(0.2, 0.7) * d * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * br ** 2))
        img = img + rng.normal(0, PIXEL_NOISE * d, img.shape)
    img = np.clip(img, 0.0, 1.0)
    out = np.repeat(img[None], c, axis=0)
    if c > 1 and d > 0:
        out = np.clip(out * rng.uniform(1 - 0.3 * d, 1, (c, 1, 1)), 0.0, 1.0)
    # quantise to byte levels so an IDX round trip is lossless
    return np.round(out * 255.0) / 255.0


def gen_synthetic_dataset(classes: int, per_class: int, shape=(1, 32, 32),
                          difficulty: float = 0.5, seed: int = 0) -> Dataset:
    """Render `per_class` jittered instances of one shape family per class.

    ``difficulty`` in [0, 1] scales position/scale/rotation jitter, clutter and
    noise; at 0 every instance of a class is identical. Output is ordered class
    by class and is byte-identical for identical arguments.
    """
    shape = tuple(int(s) for s in shape)
    if classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 examples per class")
    if classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shape families are available")
    if len(shape) != 3 or shape[0] < 1 or min(shape[1:]) < 8:
        raise ValueError(f"degenerate image shape {shape}; need C>=1 and H, W >= 8")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    inputs = np.empty((classes * per_class, *shape), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for k in range(classes):
        rng = np.random.default_rng([seed, k])
        for i in range(per_class):
            inputs[k * per_class + i] = _render(SHAPES[k], shape, difficulty, rng)
    prov = f"synthetic(seed={seed},classes={classes},per_class={per_class},shape={'x'.join(map(str, shape))},difficulty={difficulty})"
    return Dataset(inputs, labels, classes, prov)


# --------------------------------------------------------------------------
# IDX container


def _read_idx(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise IdxError(f"{path}: not an IDX file")
    rank = raw[3]
    head = 4 + 4 * rank
    if rank == 0 or len(raw) < head:
        raise IdxError(f"{path}: corrupt IDX (header)")
    dims = struct.unpack(f">{rank}I", raw[4:head])
    expected = int(np.prod(dims))
    if len(raw) - head != expected:
        raise IdxError(f"{path}: corrupt IDX (payload {len(raw) - head} bytes, dims {dims} need {expected})")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1].

    Images of rank 3 (n, H, W) get a single channel; rank 4 is (n, C, H, W).
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise IdxError(f"{images_path}: corrupt IDX (images must have rank 3 or 4)")
    if labels.ndim != 1:
        raise IdxError(f"{labels_path}: corrupt IDX (labels must have rank 1)")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if classes is None else classes
    inputs = images.astype(np.float32) / np.float32(255.0)
    return Dataset(inputs, labels, k, f"idx({images_path})")


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    write_idx(images_path, np.round(dataset.inputs * 255.0))
    write_idx(labels_path, dataset.labels)


# --------------------------------------------------------------------------


def stratified_fraction(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Per-class subsample of ceil(fraction * n_k) examples.

    Each class is ranked by one seeded permutation, so for a fixed seed a
    smaller fraction is always a subset of a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    keep = []
    for k in range(dataset.classes):
        idx = np.flatnonzero(dataset.labels == k)
        order = np.random.default_rng([seed, k]).permutation(idx.size)
        take = math.ceil(round(fraction * idx.size, 9))
        keep.append(idx[order[:take]])
    keep = np.sort(np.concatenate(keep))
    return Dataset(dataset.inputs[keep], dataset.labels[keep], dataset.classes,
                   f"{dataset.provenance}[fraction={fraction},seed={seed}]")

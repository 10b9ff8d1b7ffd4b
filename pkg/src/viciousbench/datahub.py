"""Dataset ingestion, normalization, splitting and label-space construction.

Images are stored as float32 arrays of shape ``(n, H, W, C)`` with values in
``[0, 1]``. Categorical labels are int64 class indices in ``0..N-1``; binary
labels are uint8 arrays of shape ``(n, N)``.

Real datasets are read from ``$VICIOUSBENCH_DATA/<name>/`` (IDX files as
published, optionally gzipped). The synthetic generators need no files.
"""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import tensorio
from .errors import (ArgumentError, DegenerateAttributeError, IngestionError,
                     UnsupportedDatasetError)

log = logging.getLogger(__name__)

DATA_ENV = "VICIOUSBENCH_DATA"
VALID_FRACTION = 0.1
JITTER = 0.02  # anchor jitter, as a fraction of the short side
NUISANCE_BLOBS = 3  # label-free blobs per synthetic image

# Percentage of positives per CelebA attribute, indexed by attribute code.
CELEBA_ATTRIBUTES = (
    ("5oClockShadow", 12.4), ("ArchedEyebrows", 27.5), ("Attractive", 52.0),
    ("BagsUnderEyes", 21.7), ("Bald", 2.2), ("Bangs", 14.9), ("BigLips", 24.7),
    ("BigNose", 24.8), ("BlackHair", 25.4), ("BlondHair", 14.8), ("Blurry", 5.0),
    ("BrownHair", 19.9), ("BushyEyebrows", 14.8), ("Chubby", 6.5),
    ("DoubleChin", 4.5), ("Eyeglasses", 6.5), ("Goatee", 6.0), ("GrayHair", 5.4),
    ("HeavyMakeup", 38.2), ("HighCheekbones", 46.3), ("Male", 43.2),
    ("MouthSlightlyOpen", 50.3), ("Mustache", 3.4), ("NarrowEyes", 12.5),
    ("NoBeard", 82.7), ("OvalFace", 25.9), ("PaleSkin", 4.3), ("PointyNose", 28.1),
    ("RecedingHairline", 7.6), ("RosyCheeks", 7.0), ("Sideburns", 5.7),
    ("Smiling", 51.0), ("StraightHair", 21.8), ("WavyHair", 28.7),
    ("WearingEarrings", 20.7), ("WearingHat", 4.4), ("WearingLipstick", 46.1),
    ("WearingNecklace", 12.8), ("WearingNecktie", 7.9), ("Young", 75.4),
)

_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_IDX_DATASETS = {"mnist": 10, "fmnist": 10}
SUPPORTED = ("mnist", "fmnist", "synthetic-categorical", "synthetic-binary")


@dataclass(frozen=True)
class LabelSpace:
    kind: str
    n_outputs: int
    thresholds: tuple[float, ...] | None = None
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "binary"):
            raise ArgumentError(f"label kind must be categorical or binary, got {self.kind!r}")
        if self.n_outputs < 1:
            raise ArgumentError("n_outputs must be positive")
        if self.kind == "categorical":
            if self.thresholds is not None or self.class_weights is not None:
                raise ArgumentError("categorical label spaces carry no thresholds or class weights")
            return
        if self.thresholds is None or self.class_weights is None:
            raise ArgumentError("binary label spaces need thresholds and class weights")
        if not (len(self.thresholds) == len(self.class_weights) == self.n_outputs):
            raise ArgumentError("thresholds and class weights must have one entry per attribute")
        if any(w <= 0 for w in self.class_weights):
            raise ArgumentError("class weights must be positive")

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary"

    @classmethod
    def categorical(cls, n_outputs: int) -> "LabelSpace":
        return cls("categorical", n_outputs)

    @classmethod
    def binary(cls, class_weights: Sequence[float], thresholds: Sequence[float] | None = None) -> "LabelSpace":
        weights = tuple(float(w) for w in class_weights)
        if thresholds is None:
            thresholds = (0.0,) * len(weights)
        return cls("binary", len(weights), tuple(float(t) for t in thresholds), weights)


@dataclass(frozen=True)
class Split:
    """One split: images ``(n, H, W, C)``, labels and source row indices."""

    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        for arr in (self.images, self.labels, self.indices):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return zip(self.images, self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.images[idx].copy(), self.labels[idx].copy(), self.indices[idx].copy())


@dataclass(frozen=True)
class SplitDataset:
    name: str
    train: Split
    valid: Split
    test: Split
    label_space: LabelSpace
    seed: int
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.train.images.shape[1:])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.valid, self.test):
            h.update(part.images.tobytes())
            h.update(part.labels.tobytes())
            h.update(part.indices.tobytes())
        return h.hexdigest()


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "viciousbench"


# ---------------------------------------------------------------- ingestion

def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise IngestionError(f"missing dataset file {path} (or {gz.name})")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (``.gz`` sibling accepted) into a uint8 array."""
    path = Path(path)
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IngestionError(f"truncated IDX file {path}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IngestionError(f"{path} is not an unsigned-byte IDX file")
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(shape)):
        raise IngestionError(f"{path}: header shape {shape} does not match payload")
    return body.reshape(shape)


def resize_images(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``(n, H, W, C)`` images followed by a clamp to [0, 1]."""
    h, w = size
    if images.shape[1:3] == (h, w):
        return np.clip(images, 0.0, 1.0).astype(np.float32)
    out = np.empty((len(images), h, w, images.shape[3]), dtype=np.float32)
    for start in range(0, len(images), 4096):
        chunk = torch.from_numpy(np.ascontiguousarray(images[start:start + 4096].transpose(0, 3, 1, 2)))
        chunk = F.interpolate(chunk, size=(h, w), mode="bilinear", align_corners=False)
        out[start:start + 4096] = chunk.clamp_(0.0, 1.0).permute(0, 2, 3, 1).numpy()
    return out


def _load_idx_source(name: str, size: tuple[int, int], root: Path, use_cache: bool):
    folder = root / name
    cache = root / ".cache" / f"{name}-{size[0]}x{size[1]}.vbt"
    if use_cache and cache.exists():
        try:
            xtr, ytr, xte, yte = tensorio.read_tensors(cache)
            return xtr, ytr, xte, yte
        except Exception as exc:  # stale or corrupt cache: rebuild
            log.warning("ignoring unreadable cache %s: %s", cache, exc)
    parts = []
    for split in ("train", "test"):
        img_file, lbl_file = _IDX_FILES[split]
        images = read_idx(folder / img_file)
        labels = read_idx(folder / lbl_file).astype(np.int64)
        if len(images) != len(labels):
            raise IngestionError(f"{folder}: {len(images)} images but {len(labels)} labels")
        images = images.astype(np.float32)[..., None] / 255.0
        parts += [resize_images(images, size), labels]
    if use_cache:
        try:
            tensorio.save_tensors(cache, parts)
        except OSError as exc:
            log.warning("could not write cache %s: %s", cache, exc)
    return tuple(parts)


# ---------------------------------------------------------------- synthetic

def _blob_images(rng, centers, amps, widths, size, channels, noise):
    """Render sums of isotropic Gaussian blobs; centers are in pixel units."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n, k = amps.shape
    img = np.zeros((n, h, w), dtype=np.float64)
    for j in range(k):
        dy = yy[None] - centers[:, j, 0, None, None]
        dx = xx[None] - centers[:, j, 1, None, None]
        img += amps[:, j, None, None] * np.exp(-(dy ** 2 + dx ** 2) / (2 * widths[:, j, None, None] ** 2))
    img = img[..., None].repeat(channels, axis=3)
    if channels > 1:
        img *= rng.uniform(0.6, 1.0, size=(n, 1, 1, channels))
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _anchors(n_outputs, size):
    h, w = size
    angle = 2 * np.pi * np.arange(n_outputs) / n_outputs
    radius = 0.28 * min(h, w)
    return np.stack([(h - 1) / 2 + radius * np.sin(angle), (w - 1) / 2 + radius * np.cos(angle)], axis=1)


def _nuisance(rng, n, size, count):
    h, w = size
    centers = np.stack([rng.uniform(0.15, 0.85, (n, count)) * (h - 1),
                        rng.uniform(0.15, 0.85, (n, count)) * (w - 1)], axis=2)
    amps = rng.uniform(0.15, 0.45, (n, count))
    widths = rng.uniform(0.2, 0.3, (n, count)) * min(h, w)
    return centers, amps, widths


def synthetic_categorical(n, n_outputs, size, channels=1, seed=0):
    """Each class owns a blob anchor on a ring; free nuisance blobs vary per image."""
    rng = np.random.default_rng(seed)
    h, w = size
    labels = rng.integers(0, n_outputs, size=n)
    anchor = _anchors(n_outputs, size)[labels] + rng.normal(0.0, JITTER * min(h, w), size=(n, 2))
    nc, na, nw = _nuisance(rng, n, size, NUISANCE_BLOBS)
    centers = np.concatenate([anchor[:, None], nc], axis=1)
    amps = np.concatenate([rng.uniform(0.6, 1.0, (n, 1)), na], axis=1)
    widths = np.concatenate([rng.uniform(0.08, 0.13, (n, 1)) * min(h, w), nw], axis=1)
    images = _blob_images(rng, centers, amps, widths, size, channels, noise=0.02)
    return images, labels.astype(np.int64)


def synthetic_binary(n, n_outputs, size, channels=1, seed=0, rates=None):
    """Attribute ``j`` switches on a blob at anchor ``j``; positive rates differ per attribute."""
    rng = np.random.default_rng(seed)
    h, w = size
    if rates is None:
        rates = np.linspace(0.35, 0.6, n_outputs) if n_outputs > 1 else np.array([0.45])
    labels = (rng.uniform(size=(n, n_outputs)) < np.asarray(rates)[None]).astype(np.uint8)
    anchors = _anchors(n_outputs, size)
    jitter = rng.normal(0.0, JITTER * min(h, w), size=(n, n_outputs, 2))
    nc, na, nw = _nuisance(rng, n, size, NUISANCE_BLOBS)
    centers = np.concatenate([anchors[None] + jitter, nc], axis=1)
    amps = np.concatenate([labels * rng.uniform(0.6, 1.0, size=(n, n_outputs)), na], axis=1)
    widths = np.concatenate([rng.uniform(0.08, 0.13, size=(n, n_outputs)) * min(h, w), nw], axis=1)
    images = _blob_images(rng, centers, amps, widths, size, channels, noise=0.02)
    return images, labels


# ---------------------------------------------------------------- splitting

def split_train_valid(n: int, seed: int, fraction: float = VALID_FRACTION):
    """Uniform random (unstratified) choice of the validation rows."""
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(round(n * fraction))
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def load_dataset(name: str, resize_to: tuple[int, int] = (32, 32), seed: int = 0, *,
                 root=None, n_outputs: int | None = None, n_train: int | None = None,
                 n_test: int | None = None, channels: int = 1, use_cache: bool = True) -> SplitDataset:
    """Load, normalize and split a dataset.

    Args:
        name: one of ``mnist``, ``fmnist``, ``synthetic-categorical``,
            ``synthetic-binary``.
        resize_to: target ``(H, W)``.
        seed: drives the validation split and, for synthetic sets, generation.
        root: dataset root; defaults to ``$VICIOUSBENCH_DATA``.
        n_outputs: classes/attributes (synthetic only).
        n_train, n_test: synthetic sample counts (defaults 2000/500).

    Raises:
        UnsupportedDatasetError: unknown ``name``.
        IngestionError: source files missing or malformed.
    """
    size = (int(resize_to[0]), int(resize_to[1]))
    if name in _IDX_DATASETS:
        xtr, ytr, xte, yte = _load_idx_source(name, size, data_root(root), use_cache)
        space = LabelSpace.categorical(_IDX_DATASETS[name])
    elif name == "synthetic-categorical":
        k = n_outputs or 10
        xtr, ytr = synthetic_categorical(n_train or 2000, k, size, channels, seed=seed)
        xte, yte = synthetic_categorical(n_test or 500, k, size, channels, seed=seed + 7919)
        space = LabelSpace.categorical(k)
    elif name == "synthetic-binary":
        k = n_outputs or 4
        xtr, ytr = synthetic_binary(n_train or 2000, k, size, channels, seed=seed)
        xte, yte = synthetic_binary(n_test or 500, k, size, channels, seed=seed + 7919)
        space = None
    else:
        raise UnsupportedDatasetError(f"unsupported dataset {name!r}; choose from {', '.join(SUPPORTED)}")

    tr_idx, va_idx = split_train_valid(len(xtr), seed)
    train = Split(xtr[tr_idx], ytr[tr_idx], tr_idx)
    valid = Split(xtr[va_idx], ytr[va_idx], va_idx)
    test = Split(np.asarray(xte, dtype=np.float32), np.asarray(yte), len(xtr) + np.arange(len(xte)))
    if space is None:
        space = LabelSpace.binary(compute_class_weights(train, ytr.shape[1]))
    return SplitDataset(name, train, valid, test, space, seed,
                        meta={"source_size": len(xtr) + len(xte), "resize_to": size})


def restrict_attributes(data: SplitDataset, attributes: Sequence[int]) -> SplitDataset:
    """Keep only the given binary attributes (in the given order)."""
    if not data.label_space.is_binary:
        raise ArgumentError("attribute selection needs binary labels")
    cols = list(attributes)

    def cut(part):
        return Split(part.images, np.ascontiguousarray(part.labels[:, cols]), part.indices)

    train = cut(data.train)
    space = LabelSpace.binary(compute_class_weights(train, len(cols)),
                              [data.label_space.thresholds[c] for c in cols])
    return SplitDataset(data.name, train, cut(data.valid), cut(data.test), space, data.seed,
                        meta={**data.meta, "attributes": cols})


# ---------------------------------------------------------------- label statistics

def _binary_labels(split) -> np.ndarray:
    labels = split.labels if isinstance(split, Split) else np.asarray(split)
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ArgumentError("binary labels must be a 2-D (samples x attributes) array")
    return labels


def compute_class_weights(train_split, n_attributes: int) -> list[float]:
    """Positive-class weight per attribute: (#zeros) / (#ones)."""
    labels = _binary_labels(train_split)
    if labels.shape[1] != n_attributes:
        raise ArgumentError(f"expected {n_attributes} attributes, labels have {labels.shape[1]}")
    ones = (labels == 1).sum(axis=0)
    zeros = (labels == 0).sum(axis=0)
    dead = np.flatnonzero(ones == 0)
    if dead.size:
        raise DegenerateAttributeError(f"attribute(s) {dead.tolist()} have no positive samples")
    return [int(z) / int(o) for z, o in zip(zeros, ones)]


def rank_balanced(rates: Sequence[float], k: int) -> list[int]:
    rates = [float(r) for r in rates]
    if not 0 <= k <= len(rates):
        raise ArgumentError(f"k={k} outside 0..{len(rates)}")
    order = sorted(range(len(rates)), key=lambda i: (abs(rates[i] - 0.5), i))
    return sorted(order[:k])


def select_balanced_attributes(train_split, k: int) -> list[int]:
    """Indices of the ``k`` attributes whose positive rate is closest to 0.5.

    Ties go to the lower index; the result is returned in ascending order.
    """
    labels = _binary_labels(train_split)
    return rank_balanced(labels.mean(axis=0), k)

"""Datasets, the IDX container, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadArgs,
    BadMagic,
    CorruptHeader,
    CountMismatch,
    DataEmpty,
    LabelOutOfRange,
    TruncatedFile,
    VersionUnsupported,
)
from .tensor import Tensor


@dataclass
class Dataset:
    features: np.ndarray  # [N, d_in] float64
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise DataEmpty(f"{self.split} split is empty")
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise CountMismatch(f"{len(self.features)} feature rows for {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def d_in(self):
        return self.features.shape[1]

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, split=None):
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, split or self.split)


def gen_synthetic(seed, num_classes, d_in, per_class, difficulty):
    """Gaussian clusters centred on the vertices of a randomly rotated simplex.

    Centres are unit distance apart; ``difficulty`` is the per-coordinate noise
    standard deviation relative to that spacing. Returns a ``(train, val)`` pair
    split 80/20 with equal class counts in each split.
    """
    if num_classes < 2 or per_class < 2 or d_in < num_classes or difficulty < 0:
        raise BadArgs("need num_classes >= 2, per_class >= 2, d_in >= num_classes, difficulty >= 0")
    rng = np.random.default_rng(seed)
    simplex = np.eye(num_classes) - 1.0 / num_classes
    simplex /= np.sqrt(2.0)
    rotation, _ = np.linalg.qr(rng.standard_normal((d_in, num_classes)))
    centres = simplex @ rotation.T
    n_train = max(1, min(per_class - 1, int(round(0.8 * per_class))))
    parts = {"train": ([], []), "val": ([], [])}
    for c in range(num_classes):
        x = centres[c] + difficulty * rng.standard_normal((per_class, d_in))
        for split, rows in (("train", x[:n_train]), ("val", x[n_train:])):
            parts[split][0].append(rows)
            parts[split][1].append(np.full(len(rows), c))
    out = []
    for split, (xs, ys) in parts.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        out.append(Dataset(x[order], y[order], num_classes, split))
    return tuple(out)


# ---------------------------------------------------------------- IDX

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: shorter than the magic number")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise TruncatedFile(f"{path}: declares {size} bytes of data, has {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    """MNIST-style IDX pair to a Dataset with pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1).astype(np.int64)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise DataEmpty(f"{images_path}: no samples")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels, num_classes or int(labels.max()) + 1, split)


def write_idx(path, array):
    """Write a uint8 array as IDX (3-d image stacks or 1-d label vectors)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}[array.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# ---------------------------------------------------------------- checkpoints

MAGIC = b"M2MK"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    tensors: dict  # name -> np.ndarray, file order
    provenance: dict | None = None


def encode_checkpoint(tree):
    out = [MAGIC, struct.pack("<II", VERSION, len(tree))]
    for name, value in tree.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(blob, source="<bytes>"):
    def need(pos, n):
        if pos + n > len(blob):
            raise CorruptHeader(f"{source}: truncated at byte {pos}")

    need(0, 12)
    if blob[:4] != MAGIC:
        raise CorruptHeader(f"{source}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionUnsupported(f"{source}: checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        need(pos, 4)
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(pos, n)
        try:
            name = blob[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeader(f"{source}: tensor name is not UTF-8") from None
        pos += n
        if name in tensors:
            raise CorruptHeader(f"{source}: duplicate tensor {name!r}")
        need(pos, 4)
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(pos, 8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(pos, nbytes)
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise CorruptHeader(f"{source}: {len(blob) - pos} trailing bytes")
    return Checkpoint(version, tensors)


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(tree, path, provenance=None):
    """Write ``tree`` atomically; provenance goes to a ``.json`` sidecar."""
    blob = encode_checkpoint(tree)
    atomic_write(path, blob)
    if provenance is not None:
        atomic_write(f"{os.fspath(path)}.json", json.dumps(provenance, sort_keys=True, indent=1).encode())
    return Checkpoint(VERSION, {n: (t.data if isinstance(t, Tensor) else t) for n, t in tree.items()}, provenance)


def load_checkpoint(path, requires_grad=False):
    """Read a checkpoint as a ParamTree of Tensors (file order preserved)."""
    with open(path, "rb") as f:
        ckpt = decode_checkpoint(f.read(), os.fspath(path))
    return {n: Tensor(a, requires_grad) for n, a in ckpt.tensors.items()}


def tree_digest(tree):
    """SHA-256 of a tree's checkpoint encoding."""
    return hashlib.sha256(encode_checkpoint(tree)).hexdigest()


def file_digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()

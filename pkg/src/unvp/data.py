"""Source/unseen domain datasets and their binary container.

Dataset container (little-endian)::

    magic      8 bytes  b"UNVPDATA"
    version    u32
    count      u64
    ndim       u32, then ndim x u32 extents (per-sample shape)
    label_width u8      bytes per label (1, 2, 4 or 8; unsigned)
    n_classes  u32
    low, high  f64, f64 declared input range
    levels     u32      quantization levels (0 = continuous)
    tag_len    u32, then tag_len bytes of UTF-8 domain tag
    body       count * prod(shape) f64 (row-major), then count labels
    checksum   32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocessing import Preprocessor
from .rng import rng_for

DATA_MAGIC = b"UNVPDATA"
DATA_VERSION = 1


class ChecksumError(ValueError):
    pass


class FormatVersionError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain_tag: str
    low: float
    high: float
    levels: int = 0
    n_classes: int = field(default=0)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        self.preprocessor.check_range(self.inputs)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    @property
    def preprocessor(self) -> Preprocessor:
        return Preprocessor(self.low, self.high, self.levels)

    def flat(self) -> np.ndarray:
        return self.inputs.reshape(len(self.inputs), -1)

    def preprocessed(self) -> np.ndarray:
        """Deterministic preprocessing (quantized inputs map to cell centres)."""
        return self.preprocessor(self.flat())


# --------------------------------------------------------------------------
# Blobs
# --------------------------------------------------------------------------

BLOB_RADIUS = 2.0
BLOB_STD = 0.5
BLOB_RANGE = 5.0


def _affine_shift(points: np.ndarray, rotation_deg: float, scale: float, translation) -> np.ndarray:
    a = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return scale * points @ rot.T + np.asarray(translation, dtype=np.float64)


def blob_centers(n_classes: int) -> np.ndarray:
    angles = np.pi / 2 + 2 * np.pi * np.arange(n_classes) / n_classes
    return BLOB_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_blob_domains(
    n_classes: int = 3,
    n_per_class: int = 100,
    rotation: float = 30.0,
    scale: float = 1.3,
    translation=(0.0, 0.0),
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs on a circle (source) and an independent draw moved by
    rotation about the origin, scaling and translation (unseen)."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if scale == 0:
        raise ValueError("degenerate shift: zero scale")
    centers = blob_centers(n_classes)
    labels = np.repeat(np.arange(n_classes), n_per_class)

    def draw(rng):
        return centers[labels] + BLOB_STD * rng.standard_normal((len(labels), 2))

    src = np.clip(draw(rng_for(seed, "blobs-source")), -BLOB_RANGE, BLOB_RANGE)
    uns = _affine_shift(draw(rng_for(seed, "blobs-unseen")), rotation, scale, translation)
    uns = np.clip(uns, -BLOB_RANGE, BLOB_RANGE)
    kw = dict(low=-BLOB_RANGE, high=BLOB_RANGE, levels=0, n_classes=n_classes)
    return Dataset(src, labels, "blobs-source", **kw), Dataset(uns, labels.copy(), "blobs-unseen", **kw)


# --------------------------------------------------------------------------
# Digits
# --------------------------------------------------------------------------

DIGIT_SIZE = 14
DIGIT_TEST_FRACTION = 0.3


def invert(images: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(images, dtype=np.float64)


def quantize8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def unseen_digit_transform(images: np.ndarray, seed: int) -> np.ndarray:
    """Inversion followed by a seeded per-image contrast/brightness jitter.

    ``x' = clip(0.5 + a * (1 - x - 0.5) + b, 0, 1)`` with ``a ~ U(0.5, 1)``
    and ``b ~ U(-0.15, 0.15)``, then 8-bit quantization.
    """
    rng = rng_for(seed, "digits-jitter")
    n = len(images)
    a = rng.uniform(0.5, 1.0, size=n).reshape((n,) + (1,) * (images.ndim - 1))
    b = rng.uniform(-0.15, 0.15, size=n).reshape(a.shape)
    return quantize8(0.5 + a * (invert(images) - 0.5) + b)


def build_digit_corpus(path) -> Path:
    """Write the 14x14 digit corpus (from scikit-learn's bundled 8x8 digits)."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    small = digits.images / 16.0
    big = np.stack([zoom(im, DIGIT_SIZE / 8, order=1) for im in small])
    big = quantize8(big)[:, None, :, :]
    ds = Dataset(big, digits.target, "digits-corpus", 0.0, 1.0, levels=256, n_classes=10)
    return save_dataset(ds, path)


def _shift_image(im: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(im)
    h, w = im.shape[-2:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = im[..., yd, xd]
    return out


def make_digit_domains(subset_size: int = 2000, seed: int = 0, corpus=None) -> tuple[Dataset, Dataset, Dataset]:
    """(source train, source test, unseen test) from the local digit corpus.

    Base images are split 70/30 into train and test; the training subset is
    drawn from train images with random one-pixel translations.
    """
    corpus = Path(corpus) if corpus is not None else Path("data/digits.unvpd")
    if not corpus.exists():
        raise FileNotFoundError(f"digit corpus not found at {corpus} (create it with `unvp make-digits --out {corpus}`)")
    base = load_dataset(corpus)
    rng = rng_for(seed, "digits-split")
    order = rng.permutation(len(base))
    n_test = int(round(DIGIT_TEST_FRACTION * len(base)))
    test_idx, train_idx = np.sort(order[:n_test]), order[n_test:]
    pick = rng.choice(train_idx, size=subset_size, replace=subset_size > len(train_idx))
    shifts = rng.integers(-1, 2, size=(subset_size, 2))
    train_x = np.stack([_shift_image(base.inputs[i], dy, dx) for i, (dy, dx) in zip(pick, shifts)])
    kw = dict(low=0.0, high=1.0, levels=256, n_classes=10)
    source = Dataset(train_x, base.labels[pick], "digits-source", **kw)
    test = Dataset(base.inputs[test_idx], base.labels[test_idx], "digits-source-test", **kw)
    unseen = Dataset(unseen_digit_transform(base.inputs[test_idx], seed), base.labels[test_idx], "digits-unseen", **kw)
    return source, test, unseen


# --------------------------------------------------------------------------
# Container I/O
# --------------------------------------------------------------------------


def atomic_write(path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _label_width(n_classes: int) -> int:
    for width, limit in ((1, 2**8), (2, 2**16), (4, 2**32)):
        if n_classes <= limit:
            return width
    return 8


def dumps_dataset(ds: Dataset) -> bytes:
    width = _label_width(ds.n_classes)
    tag = ds.domain_tag.encode("utf-8")
    shape = ds.sample_shape
    head = DATA_MAGIC + struct.pack("<IQI", DATA_VERSION, len(ds), len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    head += struct.pack("<BIddII", width, ds.n_classes, ds.low, ds.high, ds.levels, len(tag)) + tag
    body = ds.inputs.astype("<f8").tobytes() + ds.labels.astype(f"<u{width}").tobytes()
    blob = head + body
    return blob + hashlib.sha256(blob).digest()


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < 40 or blob[:8] != DATA_MAGIC:
        raise ChecksumError("not a dataset container (bad magic or truncated)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("dataset checksum mismatch (corrupt or truncated file)")
    off = 8
    version, count, ndim = struct.unpack_from("<IQI", payload, off)
    if version != DATA_VERSION:
        raise FormatVersionError(f"dataset format version {version}, expected {DATA_VERSION}")
    off += 16
    shape = struct.unpack_from(f"<{ndim}I", payload, off)
    off += 4 * ndim
    width, n_classes, low, high, levels, tag_len = struct.unpack_from("<BIddII", payload, off)
    off += struct.calcsize("<BIddII")
    tag = payload[off : off + tag_len].decode("utf-8")
    off += tag_len
    n_vals = count * int(np.prod(shape))
    inputs = np.frombuffer(payload, dtype="<f8", count=n_vals, offset=off).reshape((count,) + tuple(shape))
    off += 8 * n_vals
    labels = np.frombuffer(payload, dtype=f"<u{width}", count=count, offset=off)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), tag, low, high, levels, n_classes)


def save_dataset(ds: Dataset, path) -> Path:
    return atomic_write(path, dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return loads_dataset(path.read_bytes())


def resolve_dataset(config) -> dict[str, Dataset]:
    """Datasets named by a run config: ``train`` plus evaluation domains."""
    spec = config.dataset
    seed = config.data_seed if config.data_seed is not None else config.seed
    if spec == "blobs":
        kw = dict(
            n_classes=config.n_classes,
            n_per_class=config.n_per_class,
            rotation=config.rotation,
            scale=config.scale,
            translation=(config.shift_x, config.shift_y),
        )
        train, _ = make_blob_domains(seed=seed, **kw)
        test, unseen = make_blob_domains(seed=seed + 7919, **kw)
        return {"train": train, "source": test, "unseen": unseen}
    if spec == "digits":
        train, test, unseen = make_digit_domains(config.subset, seed, config.corpus)
        return {"train": train, "source": test, "unseen": unseen}
    if spec.startswith("file:"):
        ds = load_dataset(spec[5:])
        return {"train": ds, "source": ds}
    raise ValueError(f"unknown dataset spec {spec!r}")

"""Dataset loading, synthetic data and on-disk formats (IDX, CIFAR binary)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataError(ValueError):
    """Dataset contents violate the loader contract."""


class FormatError(DataError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: {msg} at byte offset {offset}")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixels outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       split or self.split, self.provenance)

    def take(self, n: int, seed: int = 0, split: str | None = None) -> "Dataset":
        """Seeded random subset of ``n`` samples (all of them if ``n >= len``)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return self.subset(idx, split)


def split_dataset(ds: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return ds.subset(train, "train"), ds.subset(test, "test")


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(path, 0, "file too short for IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(path, 0, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, len(raw), "truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(path, len(raw), f"truncated IDX payload, expected {header + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes: int = 10, split: str = "train") -> Dataset:
    """Read an MNIST-style IDX image file (and optional IDX label file)."""
    pixels = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    n = pixels.shape[0]
    if labels_path is not None:
        labels = _parse_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape != (n,):
            raise FormatError(labels_path, 8, f"label count {labels.shape} does not match {n} images")
    else:
        labels = np.zeros(n, dtype=np.int64)
    images = pixels.reshape(n, 1, *pixels.shape[1:]).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, split, f"idx:{images_path}")


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Write uint8 ``(n, h, w)`` pixels (and labels) in IDX format."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    head = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{pixels.ndim}I", *pixels.shape)
    Path(images_path).write_bytes(head + pixels.tobytes())
    if labels_path is not None and labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- CIFAR-10 binary ------------------------------------------------------------

def load_cifar_bin(path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read one or more CIFAR-10 binary batch files (1 label byte + 3072 pixels)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    images, labels = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % CIFAR_RECORD:
            raise FormatError(p, len(raw) - len(raw) % CIFAR_RECORD,
                              f"length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), num_classes, split,
                   "cifar-bin:" + ",".join(str(p) for p in paths))


def write_cifar_bin(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``(n, 3, 32, 32)`` images in [0, 1] as CIFAR-10 binary records."""
    images = np.asarray(images)
    if images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records need (3, 32, 32) images, got {images.shape[1:]}")
    rec = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = to_uint8(images).reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


# -- synthetic and bundled data ---------------------------------------------------

def _lowfreq_basis(size: int, dim: int) -> np.ndarray:
    """``dim`` smooth 2-D cosine patterns on a ``size x size`` grid."""
    coords = np.arange(size) + 0.5
    freqs = [(u, v) for s in range(1, 2 * size) for u in range(s + 1) for v in (s - u,) if (u, v) != (0, 0)]
    basis = []
    for u, v in freqs[:dim]:
        pat = np.outer(np.cos(np.pi * u * coords / size), np.cos(np.pi * v * coords / size))
        basis.append(pat / np.abs(pat).max())
    return np.stack(basis)


def synth_blobs(n: int, k: int = 2, seed: int = 0, size: int = 16, dim: int = 6,
                sigma: float = 0.35, separation: float = 1.5) -> Dataset:
    """Gaussian class clusters in a latent space, rendered as smooth images.

    Each latent coordinate weights one low-frequency cosine pattern; labels are
    balanced to within one sample.
    """
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(k, dim))
    centres *= separation / np.maximum(np.linalg.norm(centres, axis=1, keepdims=True), 1e-12)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    z = centres[labels] + sigma * rng.normal(size=(n, dim))
    basis = _lowfreq_basis(size, dim)
    imgs = 0.5 + 0.2 * np.tensordot(z, basis, axes=1)
    imgs = np.clip(imgs, 0.0, 1.0)[:, None]
    return Dataset(imgs, labels, k, "train", f"synth_blobs(n={n},k={k},seed={seed})")


def load_digits16(split: str = "all") -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, upsampled to 16x16.

    Used as an offline stand-in for MNIST-format data.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = np.stack([zoom(im / 16.0, 2, order=1) for im in d.images])
    imgs = np.clip(imgs, 0.0, 1.0)[:, None]
    return Dataset(imgs, d.target, 10, split, "sklearn.load_digits upsampled x2")


NATURAL_SOURCES = ("astronaut.png", "coffee.png", "chelsea.png", "rocket.jpg", "motorcycle_left.png",
                   "hubble_deep_field.jpg", "ihc.png", "retina.jpg", "gravel.png", "brick.png")


def natural_patches(n: int, size: int = 32, seed: int = 0, sources=NATURAL_SOURCES[:8]) -> Dataset:
    """Random RGB crops of the photographs bundled with scikit-image.

    The label is the index of the source photograph.
    """
    import skimage
    from skimage.io import imread
    from skimage.transform import downscale_local_mean

    root = Path(skimage.__file__).parent / "data"

    rng = np.random.default_rng(seed)
    photos = []
    for name in sources:
        img = np.asarray(imread(root / name), dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        img = img[..., :3] / 255.0
        # bring photos to a CIFAR-like object scale
        img = downscale_local_mean(img, (4, 4, 1))
        photos.append(np.clip(img, 0.0, 1.0))
    labels = np.arange(n) % len(photos)
    rng.shuffle(labels)
    out = np.empty((n, 3, size, size))
    for i, lab in enumerate(labels):
        p = photos[lab]
        y = rng.integers(0, p.shape[0] - size + 1)
        x = rng.integers(0, p.shape[1] - size + 1)
        out[i] = p[y:y + size, x:x + size].transpose(2, 0, 1)
    return Dataset(out, labels, len(photos), "all", f"skimage.data patches {size}px seed={seed}")


def load_dataset(name: str, seed: int = 0, n: int | None = None) -> Dataset:
    """Resolve a dataset reference.

    ``cifar:<file>[,<file>...]``, ``idx:<images>[,<labels>]``, ``blobs[:k]``,
    ``digits`` or ``natural[:size]``.
    """
    kind, _, arg = name.partition(":")
    if kind == "cifar":
        ds = load_cifar_bin([p for p in arg.split(",") if p])
    elif kind == "idx":
        parts = arg.split(",")
        ds = load_idx(parts[0], parts[1] if len(parts) > 1 else None)
    elif kind == "blobs":
        ds = synth_blobs(n or 400, int(arg or 2), seed=seed)
    elif kind == "digits":
        ds = load_digits16()
    elif kind == "natural":
        ds = natural_patches(n or 1000, int(arg or 32), seed=seed)
    else:
        raise ValueError(f"unknown dataset reference {name!r}")
    return ds.take(n, seed=seed) if n is not None else ds

"""Dataset ingestion: IDX and CIFAR-10 binary readers, normalization, and
augmentation.

Both on-disk formats are parsed defensively: every failure raises
:class:`DataError` naming the file and the byte offset where the problem
was detected, and no input byte pattern may crash the process in any other
way (the parsers are fuzz targets).

For machines without the real MNIST files, :func:`ensure_digits_idx`
synthesizes an IDX-format stand-in from scikit-learn's bundled handwritten
digits (upscaled and elastically distorted, with disjoint source glyphs
per split), so the full pipeline runs offline end to end.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np


class DataError(Exception):
    """Malformed dataset file or inconsistent contents."""


# -- dataset container -------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean/std, always computed from the training split."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W], normalized
    labels: np.ndarray  # int64 [N]
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if self.labels.ndim != 1:
            raise DataError(f"labels must be 1-d, got shape {self.labels.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


def compute_normalization(images: np.ndarray) -> NormalizationStats:
    """Per-channel statistics; zero-variance channels get std clamped to 1."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std < 1e-8, 1.0, std)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = stats.mean.reshape(1, -1, 1, 1).astype(images.dtype)
    std = stats.std.reshape(1, -1, 1, 1).astype(images.dtype)
    return (images - mean) / std


def subset(ds: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(
        images=ds.images[indices],
        labels=ds.labels[indices],
        split=ds.split,
        num_classes=ds.num_classes,
    )


def stratified_subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """First ~n/K examples of each class, shuffled; keeps class balance."""
    if n > len(ds):
        raise ValueError(f"requested {n} of {len(ds)} examples")
    rng = np.random.default_rng(seed)
    per_class = n // ds.num_classes
    chosen = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        rng.shuffle(idx)
        chosen.append(idx[:per_class])
    flat = np.concatenate(chosen)
    rng.shuffle(flat)
    return subset(ds, flat[:n])


# -- IDX container -----------------------------------------------------------------

# IDX magic: two zero bytes, a dtype code, then the number of dimensions.
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array (any rank/dtype the format allows)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header, {len(raw)} bytes at byte 0 (need 4)")
    if raw[0] != 0 or raw[1] != 0:
        raise DataError(
            f"{path}: bad IDX magic {raw[0]:#04x} {raw[1]:#04x} at byte 0 (must be zero)"
        )
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX dtype code {code:#04x} at byte 2")
    dims_end = 4 + 4 * ndim
    if len(raw) < dims_end:
        raise DataError(
            f"{path}: truncated dimension list at byte {len(raw)} (need {dims_end})"
        )
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4)
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + count * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload ends at byte {len(raw)}, expected {expected} "
            f"(data starts at byte {dims_end})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=dims_end)
    return data.reshape(tuple(int(d) for d in dims)).copy()


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (the only variant we emit)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(np.asarray(array.shape, dtype=">u4").tobytes())
        fh.write(array.tobytes())


def load_idx(
    images_path,
    labels_path,
    split: str = "train",
    num_classes: int = 10,
    stats: Optional[NormalizationStats] = None,
) -> Tuple[Dataset, NormalizationStats]:
    """Load an images/labels IDX pair into a normalized dataset.

    Pixels land in [0,1] before normalization. When ``stats`` is omitted
    the statistics are computed from these images, so call the training
    split first and feed its stats to the test split.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataError(
            f"{images_path}: expected magic {IDX_IMAGES_MAGIC:#010x} "
            f"(ubyte, rank 3), got rank {images.ndim} dtype {images.dtype}"
        )
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise DataError(
            f"{labels_path}: expected magic {IDX_LABELS_MAGIC:#010x} "
            f"(ubyte, rank 1), got rank {labels.ndim} dtype {labels.dtype}"
        )
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images.shape[0]} images ({images_path}) but "
            f"{labels.shape[0]} labels ({labels_path})"
        )
    scaled = images.astype(np.float32)[:, None, :, :] / 255.0
    if stats is None:
        stats = compute_normalization(scaled)
    ds = Dataset(
        images=apply_normalization(scaled, stats),
        labels=labels.astype(np.int64),
        split=split,
        num_classes=num_classes,
    )
    return ds, stats


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def load_mnist_dir(root) -> Tuple[Dataset, Dataset]:
    """Load the four conventional IDX files; test reuses train statistics."""
    root = Path(root)
    paths = {key: root / name for key, name in MNIST_FILES.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise DataError(f"missing IDX files: {', '.join(missing)}")
    train, stats = load_idx(paths["train_images"], paths["train_labels"], split="train")
    test, _ = load_idx(
        paths["test_images"], paths["test_labels"], split="test", stats=stats
    )
    return train, test


# -- CIFAR-10 binary ----------------------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def _read_cifar_file(path) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise DataError(
            f"{path}: length {len(raw)} is not a multiple of {_CIFAR_RECORD}; "
            f"trailing partial record starts at byte {len(raw) - len(raw) % _CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(
            f"{path}: label {labels[bad[0]]} out of range at byte {int(bad[0]) * _CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10_binary(
    paths: Sequence,
    split: str = "train",
    stats: Optional[NormalizationStats] = None,
) -> Tuple[Dataset, NormalizationStats]:
    """Load one split from CIFAR-10 binary batch files (label byte + 3072 pixels)."""
    if not paths:
        raise DataError("load_cifar10_binary: no files given")
    image_parts, label_parts = [], []
    for path in paths:
        images, labels = _read_cifar_file(path)
        image_parts.append(images)
        label_parts.append(labels)
    images = np.concatenate(image_parts).astype(np.float32) / 255.0
    labels = np.concatenate(label_parts).astype(np.int64)
    if stats is None:
        stats = compute_normalization(images)
    ds = Dataset(
        images=apply_normalization(images, stats),
        labels=labels,
        split=split,
        num_classes=10,
    )
    return ds, stats


CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


def load_cifar10_dir(root) -> Tuple[Dataset, Dataset]:
    root = Path(root)
    train_paths = [root / name for name in CIFAR_TRAIN_FILES]
    test_path = root / CIFAR_TEST_FILE
    missing = [str(p) for p in train_paths + [test_path] if not p.exists()]
    if missing:
        raise DataError(f"missing CIFAR-10 files: {', '.join(missing)}")
    train, stats = load_cifar10_binary(train_paths, split="train")
    test, _ = load_cifar10_binary([test_path], split="test", stats=stats)
    return train, test


# -- augmentation -------------------------------------------------------------------


def augment_batch(
    images: np.ndarray,
    rng: np.random.Generator,
    pad: int = 4,
    flip: bool = True,
) -> np.ndarray:
    """Random crop after zero padding, then per-instance horizontal flip."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    n, _, h, w = images.shape
    out = images
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        rows = rng.integers(0, 2 * pad + 1, size=n)
        cols = rng.integers(0, 2 * pad + 1, size=n)
        out = np.empty_like(images)
        for i in range(n):
            out[i] = padded[i, :, rows[i] : rows[i] + h, cols[i] : cols[i] + w]
    if flip:
        flips = rng.random(n) < 0.5
        out = np.where(flips[:, None, None, None], out[:, :, :, ::-1], out)
    return out


def make_augment(pad: int, flip: bool) -> Optional[Callable]:
    """Batch-transform hook for the training loop; None when disabled."""
    if pad == 0 and not flip:
        return None

    def transform(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return augment_batch(images, rng, pad=pad, flip=flip)

    return transform


# -- offline digits stand-in ---------------------------------------------------------


def resolve_data_dir(explicit=None) -> Path:
    """--data-dir flag, else MANIDP_DATA, else ./data."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("MANIDP_DATA")
    if env:
        return Path(env)
    return Path("data")


def _elastic_warp(glyph: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random affine plus smoothed random displacement field, 28x28 in/out."""
    from scipy import ndimage

    angle = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.92, 1.08)
    cos, sin = np.cos(angle), np.sin(angle)
    matrix = np.array([[cos, -sin], [sin, cos]]) / scale
    center = np.array(glyph.shape) / 2.0
    offset = center - matrix @ center + rng.uniform(-1.0, 1.0, size=2)
    warped = ndimage.affine_transform(glyph, matrix, offset=offset, order=1)

    alpha, sigma = 3.0, 4.0
    grid = np.indices(glyph.shape).astype(np.float64)
    for axis in range(2):
        noise = rng.uniform(-1.0, 1.0, size=glyph.shape)
        grid[axis] += ndimage.gaussian_filter(noise, sigma) * alpha
    warped = ndimage.map_coordinates(warped, grid, order=1)
    return np.clip(warped, 0.0, 1.0)


def generate_digits_split(
    n: int, seed: int, source_slice: slice
) -> Tuple[np.ndarray, np.ndarray]:
    """Expand scikit-learn's 8x8 digits into n distorted 28x28 glyphs.

    ``source_slice`` picks which base glyphs may be used, so train and test
    splits can draw from disjoint handwriting samples.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    base = load_digits()
    images = base.images[source_slice] / 16.0
    labels = base.target[source_slice]
    upscaled = np.stack(
        [ndimage.zoom(img, 28 / 8, order=1) for img in images]
    )
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(upscaled), size=n)
    out = np.empty((n, 28, 28), dtype=np.uint8)
    for i, pick in enumerate(picks):
        warped = _elastic_warp(upscaled[pick], rng)
        out[i] = (warped * 255.0).round().astype(np.uint8)
    return out, labels[picks].astype(np.uint8)


def ensure_digits_idx(
    root, n_train: int = 10000, n_test: int = 10000, seed: int = 0
) -> Dict[str, Path]:
    """Write the four MNIST-named IDX files under root unless already present.

    Even-indexed base glyphs feed the train split and odd-indexed ones the
    test split: no glyph appears in both, while both splits cover the same
    handwriting styles (mirroring how the MNIST splits were remixed from a
    shared writer pool).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = {key: root / name for key, name in MNIST_FILES.items()}
    if all(p.exists() for p in paths.values()):
        return paths
    train_images, train_labels = generate_digits_split(n_train, seed, slice(0, None, 2))
    test_images, test_labels = generate_digits_split(n_test, seed + 1, slice(1, None, 2))
    write_idx(paths["train_images"], train_images)
    write_idx(paths["train_labels"], train_labels)
    write_idx(paths["test_images"], test_images)
    write_idx(paths["test_labels"], test_labels)
    return paths

"""
Dataset Builder for ECOC training and attack campaigns

Sources:
1. MNIST-style IDX files (`idx:<images>,<labels>[,<limit>]`)
2. Gaussian blobs on a binary lattice (`synthetic:M=4,dims=16,sep=8,...`), the fast
   substrate for tests and for the many-class stand-in configurations

Every dataset carries the source line it came from, so a checkpoint can record it and
later commands can regenerate the exact same data and splits.
"""

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models import SyntheticSpec

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Affine window that maps raw blob coordinates into [0, 1]: [-4, sep + 4].
_BLOB_MARGIN = 4.0


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled images with values in [0, 1]; ids index into the source it was loaded from."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: Optional[np.ndarray] = None
    source: str = ""
    pixel_range: str = "unit"
    split_name: str = "all"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        ids = np.arange(len(labels)) if self.ids is None else np.array(self.ids, dtype=np.int64)
        if len(images) != len(labels) or len(ids) != len(labels):
            raise ValueError(
                f"Image/label/id counts disagree: {len(images)}/{len(labels)}/{len(ids)}"
            )
        if self.num_classes < 2:
            raise ValueError(f"Need at least 2 classes, got {self.num_classes}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"Labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("Pixel values must lie in [0, 1]")
        for arr in (images, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def pixel_count(self) -> int:
        return int(np.prod(self.image_shape))

    def subset(self, indices, split_name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            split_name=split_name or self.split_name,
        )

    def of_class(self, k: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == k))

    def by_id(self, image_id: int) -> Tuple[np.ndarray, int]:
        matches = np.flatnonzero(self.ids == image_id)
        if not len(matches):
            raise KeyError(f"No image with id {image_id} in split '{self.split_name}'")
        return self.images[matches[0]], int(self.labels[matches[0]])


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_idx(path: Union[str, Path], magic: int, ndim: int) -> Tuple[Tuple[int, ...], bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IdxFormatError(f"Cannot read {path}: {e}")
    header_size = 4 * (1 + ndim)
    if len(data) < header_size:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    found, *dims = struct.unpack(f">{1 + ndim}I", data[:header_size])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    payload = data[header_size:]
    expected = int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise IdxFormatError(f"{path}: {len(payload) - expected} trailing bytes after the payload")
    return tuple(dims), payload


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             limit: Optional[int] = None, num_classes: Optional[int] = None) -> Dataset:
    """
    Load an IDX image/label pair; pixels are scaled to [0, 1] and shaped (K, 1, rows, cols).

    The class count defaults to the largest label in the whole file plus one, so a limited
    prefix keeps the same M as the full set.
    """
    (count, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,), raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise IdxFormatError(f"Image count {count} does not match label count {label_count}")

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1 if len(labels) else 2)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if len(labels) and labels.max() >= num_classes:
        raise IdxFormatError(f"Label {labels.max()} out of range for {num_classes} classes")

    source = f"idx:{images_path},{labels_path}" + (f",{limit}" if limit is not None else "")
    logger.info("Loaded %d IDX images of %dx%d from %s", len(labels), rows, cols, images_path)
    return Dataset(images=images / 255.0, labels=labels, num_classes=num_classes, source=source)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Union[str, Path],
              labels_path: Union[str, Path]) -> None:
    """Write uint8 images (K, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

def lattice_means(M: int, dims: int, separation: float) -> np.ndarray:
    """Class k sits at separation × (binary digits of k) on the first ⌈log₂ M⌉ axes."""
    bits = max(1, (M - 1).bit_length())
    if dims < bits:
        raise ValueError(f"{M} classes need at least {bits} dimensions, got {dims}")
    means = np.zeros((M, dims))
    for k in range(M):
        for j in range(bits):
            means[k, j] = separation * ((k >> j) & 1)
    return means


def synthesize_gaussian_blobs(M: int, dims: int, per_class: int, separation: float,
                              seed: int = 0) -> Dataset:
    """
    Unit-variance Gaussian blobs around lattice means, mapped affinely into [0, 1].

    Classes adjacent on the lattice are `separation` apart along one axis; the affine map
    and the final clip act on every class alike, so a margin of separation/2 ≥ 4σ makes the
    classes linearly separable up to a negligible Bayes error.
    """
    spec = SyntheticSpec(num_classes=M, dims=dims, separation=separation, per_class=per_class, seed=seed)
    if per_class == 0:
        raise ValueError("per_class=0 gives an empty dataset")

    rng = np.random.default_rng(seed)
    means = lattice_means(M, dims, separation)
    labels = np.repeat(np.arange(M), per_class)
    raw = means[labels] + rng.standard_normal((len(labels), dims))
    order = rng.permutation(len(labels))
    raw, labels = raw[order], labels[order]

    lo, hi = -_BLOB_MARGIN, separation + _BLOB_MARGIN
    images = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return Dataset(images=images, labels=labels, num_classes=M, source="synthetic:" + spec.to_line())


def from_spec(spec: SyntheticSpec) -> Dataset:
    return synthesize_gaussian_blobs(spec.num_classes, spec.dims, spec.per_class, spec.separation, spec.seed)


def load_source(line: str) -> Dataset:
    """Regenerate a dataset from its source line."""
    kind, sep, rest = line.partition(":")
    if not sep:
        raise ValueError(f"Dataset source must look like 'synthetic:...' or 'idx:...', got '{line}'")
    if kind == "synthetic":
        return from_spec(SyntheticSpec.parse(rest))
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) not in (2, 3):
            raise ValueError(f"idx source needs '<images>,<labels>[,<limit>]', got '{rest}'")
        limit = int(parts[2]) if len(parts) == 3 else None
        return load_idx(parts[0], parts[1], limit=limit)
    raise ValueError(f"Unknown dataset source kind '{kind}'")


# ---------------------------------------------------------------------------
# Splits and sampling
# ---------------------------------------------------------------------------

_SPLIT_NAMES = {2: ("train", "test"), 3: ("train", "validation", "test")}


def split(dataset: Dataset, fractions: Sequence[float], seed: int = 0,
          names: Optional[Sequence[str]] = None) -> List[Dataset]:
    """
    Shuffle by seed and cut into consecutive parts.

    Sizes are round(f·K) for every part but the last, which takes the remainder, so the
    parts are disjoint and cover the dataset.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must be non-negative and sum to 1, got {fractions}")
    names = list(names) if names else list(_SPLIT_NAMES.get(len(fractions), ()))
    if len(names) != len(fractions):
        names = [f"part{i}" for i in range(len(fractions))]

    total = len(dataset)
    order = np.random.default_rng(seed).permutation(total)
    parts, start = [], 0
    for i, f in enumerate(fractions):
        size = total - start if i == len(fractions) - 1 else min(int(round(f * total)), total - start)
        parts.append(dataset.subset(order[start:start + size], split_name=names[i]))
        start += size
    return parts


def sample_n(dataset: Dataset, k: int, seed: int = 0) -> Dataset:
    """k distinct items chosen by seed, kept in dataset order."""
    if k < 0 or k > len(dataset):
        raise ValueError(f"Cannot sample {k} items from a dataset of {len(dataset)}")
    chosen = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:k])
    return dataset.subset(chosen)


def describe(dataset: Dataset) -> str:
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    lines = [
        f"Source: {dataset.source or '(in-memory)'}",
        f"Split: {dataset.split_name}",
        f"Items: {len(dataset)} of shape {dataset.image_shape}",
        "Per class: " + ", ".join(f"{k}:{n}" for k, n in enumerate(counts)),
    ]
    return "\n".join(lines)


if __name__ == "__main__":
    print(describe(synthesize_gaussian_blobs(4, 16, 100, 8.0, seed=7)))

"""Datasets, episode sampling, poison masks, and the FSDS on-disk format.

Images are float64 arrays of shape (ch, H, W) with intensities in
[I_MIN, I_MAX] = [-1, 1]. A few-shot task bundles a support set, a seed
query set, and a number of unseen evaluation query sets that are mutually
disjoint by instance identity.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    BadMagicError,
    DataError,
    DimensionMismatchError,
    TruncatedFileError,
)

I_MIN = -1.0
I_MAX = 1.0

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1

# Amplitude of the standardized class templates before clipping. High enough
# that classes are well separated, low enough that little of the template
# saturates at the intensity bounds.
_TEMPLATE_AMPLITUDE = 0.8


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabeledSet:
    """A set of images with class labels (and optional source identities).

    ids, when present, holds one (class, instance) pair per image naming the
    originating slot in the dataset; it is metadata used for disjointness
    checks and never enters any computation.
    """

    images: np.ndarray  # (n, ch, H, W) float64 in [I_MIN, I_MAX]
    labels: np.ndarray  # (n,) int64
    ids: np.ndarray | None = None  # (n, 2) int64, optional

    def __post_init__(self):
        images = _freeze(np.asarray(self.images, dtype=np.float64))
        labels = _freeze(np.asarray(self.labels, dtype=np.int64))
        if images.ndim != 4:
            raise ValueError(f"images must be (n, ch, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("images and labels must have equal length")
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain non-finite values")
        if images.size and (images.min() < I_MIN or images.max() > I_MAX):
            raise ValueError("pixel intensities outside [-1, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        if self.ids is not None:
            ids = _freeze(np.asarray(self.ids, dtype=np.int64))
            if ids.shape != (images.shape[0], 2):
                raise ValueError("ids must be (n, 2)")
            object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.images.shape[0]

    def replace_images(self, images: np.ndarray) -> "LabeledSet":
        return LabeledSet(images, self.labels, self.ids)

    def subset(self, indices) -> "LabeledSet":
        idx = np.asarray(indices, dtype=np.int64)
        ids = None if self.ids is None else self.ids[idx]
        return LabeledSet(self.images[idx], self.labels[idx], ids)


@dataclass(frozen=True)
class Task:
    """One few-shot episode: support, seed query, and unseen eval query sets."""

    way: int
    support: LabeledSet
    seed_query: LabeledSet
    eval_queries: tuple[LabeledSet, ...]
    class_ids: tuple[int, ...] = ()  # original dataset classes, metadata only

    def __post_init__(self):
        for part in (self.support, self.seed_query, *self.eval_queries):
            if len(part) and part.labels.max() >= self.way:
                raise ValueError("label exceeds task way")
        present = np.unique(self.support.labels)
        if len(present) != self.way:
            raise ValueError("every class must appear in the support set")

    def with_support(self, support: LabeledSet) -> "Task":
        return Task(self.way, support, self.seed_query, self.eval_queries, self.class_ids)


@dataclass(frozen=True)
class Dataset:
    """Per-class image collections with fixed dimensions."""

    images: tuple[np.ndarray, ...]  # one (n_c, ch, H, W) array per class
    dims: tuple[int, int, int]  # (ch, H, W)
    provenance: str

    def __post_init__(self):
        frozen = []
        for arr in self.images:
            arr = _freeze(np.asarray(arr, dtype=np.float64))
            if arr.shape[1:] != tuple(self.dims):
                raise ValueError("class instances do not match declared dims")
            frozen.append(arr)
        object.__setattr__(self, "images", tuple(frozen))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def classes(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class PoisonMask:
    """Sorted support positions whose pixels an attack may perturb."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            raise ValueError("mask indices must be unique")
        if idx and idx[0] < 0:
            raise ValueError("mask indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset of smooth class templates."""

    classes: int
    instances_per_class: int
    dims: tuple[int, int, int] = (1, 28, 28)
    template_smoothness: float = 2.0
    noise_sigma: float = 0.1
    max_translation: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.instances_per_class < 1:
            raise ValueError("classes and instances_per_class must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def content_hash(self) -> str:
        blob = json.dumps(
            {
                "classes": self.classes,
                "instances_per_class": self.instances_per_class,
                "dims": list(self.dims),
                "template_smoothness": self.template_smoothness,
                "noise_sigma": self.noise_sigma,
                "max_translation": self.max_translation,
                "seed": self.seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _template_from(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    raw = rng.standard_normal(spec.dims)
    smooth = gaussian_filter(raw, sigma=(0.0, spec.template_smoothness, spec.template_smoothness))
    smooth = (smooth - smooth.mean()) / max(smooth.std(), 1e-12)
    return np.clip(smooth * _TEMPLATE_AMPLITUDE, I_MIN, I_MAX)


def class_template(spec: SyntheticSpec, cls: int) -> np.ndarray:
    """The fixed smoothed template for one class, already clipped to range."""
    return _template_from(np.random.default_rng(spec.seed + cls), spec)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Build a dataset of per-class templates plus noise and small shifts.

    Instances of class c are clamp(roll(T_c, dy, dx) + sigma * noise) where
    T_c is a seeded low-pass-filtered noise template. Fully deterministic
    for a fixed spec.
    """
    per_class = []
    for c in range(spec.classes):
        rng = np.random.default_rng(spec.seed + c)
        template = _template_from(rng, spec)
        instances = np.empty((spec.instances_per_class, *spec.dims))
        for i in range(spec.instances_per_class):
            dy, dx = rng.integers(-spec.max_translation, spec.max_translation + 1, size=2)
            shifted = np.roll(template, (int(dy), int(dx)), axis=(1, 2))
            noise = rng.standard_normal(spec.dims)
            instances[i] = np.clip(shifted + spec.noise_sigma * noise, I_MIN, I_MAX)
        per_class.append(instances)
    return Dataset(tuple(per_class), spec.dims, provenance=f"synthetic:{spec.content_hash()}")


# ---------------------------------------------------------------------------
# FSDS on-disk format
# ---------------------------------------------------------------------------

def encode_pixels(images: np.ndarray) -> np.ndarray:
    """Quantize [-1, 1] float pixels to the u8 grid used on disk."""
    v = np.rint((np.asarray(images, dtype=np.float64) - I_MIN) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def decode_pixels(raw: np.ndarray) -> np.ndarray:
    """Invert encode_pixels: x = v / 127.5 - 1."""
    return np.asarray(raw, dtype=np.float64) / 127.5 - 1.0


def dataset_to_bytes(dataset: Dataset) -> bytes:
    ch, h, w = dataset.dims
    parts = [FSDS_MAGIC, struct.pack("<IIIII", FSDS_VERSION, dataset.classes, ch, h, w)]
    for arr in dataset.images:
        parts.append(struct.pack("<I", arr.shape[0]))
        parts.append(encode_pixels(arr).tobytes())
    return b"".join(parts)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(dataset))


def dataset_from_bytes(blob: bytes, provenance: str = "bytes") -> Dataset:
    if blob[:4] != FSDS_MAGIC:
        raise BadMagicError(f"expected magic {FSDS_MAGIC!r}, got {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedFileError(
                f"file ends at byte {len(blob)}, needed {off + n}"
            )
        chunk = blob[off:off + n]
        off += n
        return chunk

    version, classes, ch, h, w = struct.unpack("<IIIII", take(20))
    if version != FSDS_VERSION:
        raise DataError(f"unsupported FSDS version {version}")
    if min(ch, h, w) < 1 or classes < 1:
        raise DimensionMismatchError(f"invalid dims classes={classes} ch={ch} H={h} W={w}")
    per_class = []
    item = ch * h * w
    for _ in range(classes):
        (count,) = struct.unpack("<I", take(4))
        raw = np.frombuffer(take(count * item), dtype=np.uint8)
        per_class.append(decode_pixels(raw).reshape(count, ch, h, w))
    if off != len(blob):
        raise DimensionMismatchError(
            f"{len(blob) - off} trailing bytes beyond declared contents"
        )
    return Dataset(tuple(per_class), (ch, h, w), provenance=provenance)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    return dataset_from_bytes(blob, provenance=str(path))


# ---------------------------------------------------------------------------
# Episode sampling and poison masks
# ---------------------------------------------------------------------------

def sample_task(
    dataset: Dataset,
    way: int,
    shots: int,
    queries_per_class: int,
    num_eval_sets: int,
    rng: np.random.Generator,
) -> Task:
    """Draw one episode with support, seed query, and disjoint eval query sets.

    Classes are sampled without replacement and relabeled to 0..way-1; the
    per-class instance pools are partitioned so that the support, seed query,
    and every eval query set share no instance.
    """
    if way < 1 or way > dataset.classes:
        raise DataError(f"way={way} not in 1..{dataset.classes}")
    need = shots + queries_per_class * (1 + num_eval_sets)
    chosen = rng.choice(dataset.classes, size=way, replace=False)
    support_rows, seed_rows, eval_rows = [], [], [[] for _ in range(num_eval_sets)]
    for new_label, cls in enumerate(int(c) for c in chosen):
        pool = dataset.images[cls]
        if pool.shape[0] < need:
            raise DataError(
                f"class {cls} has {pool.shape[0]} instances, task needs {need}"
            )
        order = rng.permutation(pool.shape[0])
        cur = 0

        def draw(k):
            nonlocal cur
            picked = order[cur:cur + k]
            cur += k
            return [(pool[j], new_label, (cls, int(j))) for j in picked]

        support_rows.extend(draw(shots))
        seed_rows.extend(draw(queries_per_class))
        for s in range(num_eval_sets):
            eval_rows[s].extend(draw(queries_per_class))

    def pack(rows):
        images = np.stack([r[0] for r in rows])
        labels = np.asarray([r[1] for r in rows], dtype=np.int64)
        ids = np.asarray([r[2] for r in rows], dtype=np.int64)
        return LabeledSet(images, labels, ids)

    return Task(
        way=way,
        support=pack(support_rows),
        seed_query=pack(seed_rows),
        eval_queries=tuple(pack(rows) for rows in eval_rows),
        class_ids=tuple(int(c) for c in chosen),
    )


def make_poison_mask(task: Task, fraction: float, rng: np.random.Generator) -> PoisonMask:
    """Select round(fraction * shots) support positions per class, half-to-even."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    indices: list[int] = []
    for c in range(task.way):
        positions = np.flatnonzero(task.support.labels == c)
        k = round(fraction * len(positions))
        if k == 0:
            continue
        picked = rng.choice(positions, size=k, replace=False)
        indices.extend(int(p) for p in picked)
    if not indices:
        raise ValueError(
            f"fraction {fraction} rounds to zero poisoned shots in every class"
        )
    return PoisonMask(tuple(indices))

"""FiLM-conditioned convolutional meta-learner with exact input gradients.

The feature extractor is a stack of conv3x3 -> FiLM -> ReLU -> avgpool2x2
blocks whose flattened final map is the embedding. Task adaptation encodes
the support set as the mean of unmodulated embeddings, maps that encoding
through per-block affine generators to FiLM scales/shifts, and computes
class prototypes as per-class means of modulated support embeddings.
Queries are classified by negative squared Euclidean distance to the
prototypes. Everything runs in float64 and gradients with respect to
support or query pixels are exact (reverse-mode through the whole graph).
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadMagicError,
    DataError,
    NumericError,
    TruncatedFileError,
)
from .taskdata import Dataset, LabeledSet, PoisonMask, sample_task

FSCK_MAGIC = b"FSCK"
FSCK_VERSION = 1
_META_NAME = "meta"

DROPOUT_STRATEGIES = ("none", "block_wise", "layer_wise", "gaussian")


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the feature extractor.

    Kernels are 3x3 stride-1 with same padding; every block ends in a 2x2
    average pool, so the input dimensions must be divisible by 2**blocks.
    """

    in_channels: int
    image_hw: tuple[int, int]
    blocks: int = 4
    channels: int = 32
    film: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(d) for d in self.image_hw))
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        h, w = self.image_hw
        if h % (1 << self.blocks) or w % (1 << self.blocks):
            raise ValueError(
                f"image dims {h}x{w} not divisible by 2^{self.blocks}"
            )

    @property
    def embed_dim(self) -> int:
        h, w = self.image_hw
        return self.channels * (h >> self.blocks) * (w >> self.blocks)


@dataclass(frozen=True)
class FiLMParams:
    """Per-block, per-channel scales (zeta) and shifts (beta)."""

    scales: np.ndarray  # (blocks, channels)
    shifts: np.ndarray  # (blocks, channels)

    def __post_init__(self):
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64))
        object.__setattr__(self, "shifts", np.asarray(self.shifts, dtype=np.float64))
        if self.scales.shape != self.shifts.shape or self.scales.ndim != 2:
            raise ValueError("scales and shifts must both be (blocks, channels)")

    @staticmethod
    def identity(blocks: int, channels: int) -> "FiLMParams":
        return FiLMParams(np.ones((blocks, channels)), np.zeros((blocks, channels)))


@dataclass(frozen=True)
class TaskParams:
    """Adapted state: FiLM modulation (None for film-free nets) + prototypes."""

    film: FiLMParams | None
    prototypes: np.ndarray  # (C, embed_dim)

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=np.float64)
        if not np.all(np.isfinite(protos)):
            raise ValueError("prototypes must be finite")
        object.__setattr__(self, "prototypes", protos)

    @property
    def way(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class DropoutSpec:
    """FiLM dropout applied during attack-gradient computation."""

    strategy: str = "none"
    rate: float = 0.0

    def __post_init__(self):
        if self.strategy not in DROPOUT_STRATEGIES:
            raise ValueError(f"unknown dropout strategy {self.strategy!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("dropout rate must be in [0, 1]")
        if self.strategy == "gaussian" and self.rate >= 1.0:
            raise ValueError("gaussian dropout is undefined at rate 1")

    @property
    def gaussian_std(self) -> float:
        return math.sqrt(self.rate / (1.0 - self.rate))

    @property
    def active(self) -> bool:
        return self.strategy != "none" and self.rate > 0.0


@dataclass
class ModelWeights:
    """Trained parameters keyed by canonical tensor names.

    Names are block{i}.kernel / block{i}.bias for the extractor and
    film_gen{i}.weight / film_gen{i}.bias for the per-block generators
    (present only when the config has FiLM).
    """

    config: NetConfig
    tensors: dict[str, np.ndarray]

    def fingerprint(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()[:16]


def tensor_names(config: NetConfig) -> list[str]:
    names = []
    for i in range(config.blocks):
        names += [f"block{i}.kernel", f"block{i}.bias"]
    if config.film:
        for i in range(config.blocks):
            names += [f"film_gen{i}.weight", f"film_gen{i}.bias"]
    return names


def init_weights(config: NetConfig, seed: int) -> ModelWeights:
    """Seeded uniform fan-in initialization; FiLM generators start at zero.

    Zero generators emit (zeta - 1, beta) = 0, i.e. identity modulation, so
    a freshly initialized adaptive net behaves exactly like its plain twin.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for i in range(config.blocks):
        fan_in = c_in * 9
        bound = math.sqrt(6.0 / fan_in)
        tensors[f"block{i}.kernel"] = rng.uniform(
            -bound, bound, (config.channels, c_in, 3, 3)
        )
        tensors[f"block{i}.bias"] = np.zeros(config.channels)
        c_in = config.channels
    if config.film:
        for i in range(config.blocks):
            tensors[f"film_gen{i}.weight"] = np.zeros(
                (2 * config.channels, config.embed_dim)
            )
            tensors[f"film_gen{i}.bias"] = np.zeros(2 * config.channels)
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# Graph builders (shared by the public value-level ops and the gradient ops)
# ---------------------------------------------------------------------------

def _as_tensors(weights: ModelWeights, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in weights.tensors.items()}


def _film_tensors(film: FiLMParams) -> list[tuple[Tensor, Tensor]]:
    return [
        (Tensor(film.scales[i]), Tensor(film.shifts[i]))
        for i in range(film.scales.shape[0])
    ]


def _embed_graph(wt, config: NetConfig, x: Tensor, film) -> Tensor:
    if x.data.ndim != 4 or x.data.shape[1:] != (config.in_channels, *config.image_hw):
        raise ValueError(
            f"expected images of shape (n, {config.in_channels}, "
            f"{config.image_hw[0]}, {config.image_hw[1]}), got {x.data.shape}"
        )
    h = x
    for i in range(config.blocks):
        h = ad.conv3x3(h, wt[f"block{i}.kernel"], wt[f"block{i}.bias"])
        if film is not None:
            h = ad.film(h, film[i][0], film[i][1])
        h = ad.relu(h)
        h = ad.avgpool2(h)
    return ad.reshape(h, (x.data.shape[0], config.embed_dim))


def _film_graph(wt, config: NetConfig, encoding: Tensor) -> list[tuple[Tensor, Tensor]]:
    c = config.channels
    out = []
    for i in range(config.blocks):
        raw = ad.add(ad.matvec(wt[f"film_gen{i}.weight"], encoding), wt[f"film_gen{i}.bias"])
        zeta = ad.add_scalar(ad.slice0(raw, 0, c), 1.0)
        beta = ad.slice0(raw, c, 2 * c)
        out.append((zeta, beta))
    return out


def _apply_dropout_graph(film, mods):
    if mods is None:
        return film
    out = []
    for (zeta, beta), (mz, az, mb) in zip(film, mods):
        zeta = ad.add(ad.mul(zeta, Tensor(mz)), Tensor(az))
        beta = ad.mul(beta, Tensor(mb))
        out.append((zeta, beta))
    return out


def _class_rows(labels: np.ndarray, way: int) -> list[np.ndarray]:
    rows = []
    for c in range(way):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise DataError(f"class {c} has no support examples")
        rows.append(members)
    return rows


def _adapt_graph(wt, config, x_support: Tensor, labels, way, dropout_mods=None):
    """Returns (film tensors or None, prototype tensor (way, E))."""
    film = None
    if config.film:
        plain = _embed_graph(wt, config, x_support, None)
        encoding = ad.omean(plain)
        film = _apply_dropout_graph(_film_graph(wt, config, encoding), dropout_mods)
    adapted = _embed_graph(wt, config, x_support, film)
    protos = ad.stack0([ad.omean(ad.gather(adapted, rows)) for rows in _class_rows(labels, way)])
    return film, protos


def _infer_way(labels: np.ndarray) -> int:
    if labels.size == 0:
        raise DataError("support set is empty")
    return int(labels.max()) + 1


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def embed(weights: ModelWeights, film: FiLMParams | None, images: np.ndarray) -> np.ndarray:
    """Embed a batch of images, optionally modulated by FiLM parameters."""
    wt = _as_tensors(weights)
    ft = None if film is None else _film_tensors(film)
    return _embed_graph(wt, weights.config, Tensor(images), ft).data


def adapt(weights: ModelWeights, support: LabeledSet) -> TaskParams:
    """Compute task parameters (FiLM + prototypes) from a support set."""
    way = _infer_way(support.labels)
    wt = _as_tensors(weights)
    film, protos = _adapt_graph(wt, weights.config, Tensor(support.images), support.labels, way)
    film_params = None
    if film is not None:
        film_params = FiLMParams(
            np.stack([z.data for z, _ in film]),
            np.stack([b.data for _, b in film]),
        )
    return TaskParams(film_params, protos.data)


def predict_logits(weights: ModelWeights, psi: TaskParams, images: np.ndarray) -> np.ndarray:
    """Logits -(distance^2) of each image against each prototype."""
    wt = _as_tensors(weights)
    ft = None if psi.film is None else _film_tensors(psi.film)
    e = _embed_graph(wt, weights.config, Tensor(images), ft)
    return ad.neg_sqdist(e, Tensor(psi.prototypes)).data


def predict_classes(weights: ModelWeights, psi: TaskParams, images: np.ndarray) -> np.ndarray:
    """Argmax predictions; exact ties resolve to the lowest class index."""
    return np.argmax(predict_logits(weights, psi, images), axis=1)


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = ad.log_softmax_rows(np.asarray(logits, dtype=np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())


def draw_film_dropout(spec: DropoutSpec, blocks: int, channels: int, rng: np.random.Generator):
    """Pre-draw the per-block multiplicative dropout constants, or None.

    Block-wise zeroes a whole block's modulation back to identity; layer-wise
    masks each modulated layer independently (this extractor has one FiLM
    layer per block, so the two coincide in granularity); gaussian multiplies
    scales and shifts elementwise by 1 + Normal(0, d/(1-d)) noise.
    """
    if not spec.active:
        return None
    mods = []
    if spec.strategy in ("block_wise", "layer_wise"):
        keep = (rng.random(blocks) >= spec.rate).astype(np.float64)
        for b in range(blocks):
            mods.append((keep[b], 1.0 - keep[b], keep[b]))
    else:
        std = spec.gaussian_std
        for _ in range(blocks):
            eta_scale = 1.0 + rng.normal(0.0, std, channels)
            eta_shift = 1.0 + rng.normal(0.0, std, channels)
            mods.append((eta_scale, 0.0, eta_shift))
    return mods


def apply_film_dropout(film: FiLMParams | None, spec: DropoutSpec, rng: np.random.Generator):
    """Perturb FiLM parameters per the dropout spec (no-op for film=None)."""
    if film is None:
        return None
    blocks, channels = film.scales.shape
    mods = draw_film_dropout(spec, blocks, channels, rng)
    if mods is None:
        return film
    scales = film.scales.copy()
    shifts = film.shifts.copy()
    for b, (mz, az, mb) in enumerate(mods):
        scales[b] = scales[b] * mz + az
        shifts[b] = shifts[b] * mb
    return FiLMParams(scales, shifts)


def grad_support(
    weights: ModelWeights,
    support: LabeledSet,
    mask: PoisonMask,
    query: LabeledSet,
    dropout: DropoutSpec = DropoutSpec(),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Exact gradient of the query loss with respect to masked support pixels.

    The loss is the mean cross-entropy over the whole query set of the model
    adapted on the given support; differentiation runs through the set
    encoder, the FiLM generators, and the prototype means. The returned array
    matches the support shape with zeros at unmasked positions.
    """
    if len(query) < 1:
        raise ValueError("query set must contain at least one element")
    idx = mask.as_array()
    if idx.size == 0 or idx.max() >= len(support):
        raise ValueError("poison mask out of range or empty")
    way = _infer_way(support.labels)
    wt = _as_tensors(weights)
    leaf = Tensor(support.images[idx], requires_grad=True)
    x_s = ad.paste(Tensor(support.images), leaf, idx)
    mods = None
    if dropout.active:
        if rng is None:
            raise ValueError("stochastic dropout requires an rng")
        mods = draw_film_dropout(dropout, weights.config.blocks, weights.config.channels, rng)
    film, protos = _adapt_graph(wt, weights.config, x_s, support.labels, way, mods)
    e_q = _embed_graph(wt, weights.config, Tensor(query.images), film)
    scalar = ad.cross_entropy(ad.neg_sqdist(e_q, protos), query.labels, "mean")
    ad.backward(scalar)
    full = np.zeros_like(support.images)
    full[idx] = leaf.grad
    return full


def grad_query_batch(
    weights: ModelWeights,
    psi: TaskParams,
    images: np.ndarray,
    labels: np.ndarray,
    film: FiLMParams | None = None,
) -> np.ndarray:
    """Per-image exact loss gradients for a batch, task state frozen.

    Gradients never couple distinct images under a fixed task state, so each
    row equals grad_query of that image alone. film overrides psi.film (used
    for dropout-perturbed attack gradients); prototypes stay as given.
    """
    leaf = Tensor(np.asarray(images), requires_grad=True)
    wt = _as_tensors(weights)
    used = psi.film if film is None else film
    ft = None if used is None else _film_tensors(used)
    e = _embed_graph(wt, weights.config, leaf, ft)
    scalar = ad.cross_entropy(ad.neg_sqdist(e, Tensor(psi.prototypes)), labels, "sum")
    ad.backward(scalar)
    return leaf.grad


def grad_query(
    weights: ModelWeights,
    psi: TaskParams,
    image: np.ndarray,
    label: int,
    pixel_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of one query image's loss with the task state frozen."""
    leaf = Tensor(np.asarray(image)[None], requires_grad=True)
    wt = _as_tensors(weights)
    ft = None if psi.film is None else _film_tensors(psi.film)
    e = _embed_graph(wt, weights.config, leaf, ft)
    scalar = ad.cross_entropy(ad.neg_sqdist(e, Tensor(psi.prototypes)), [label], "mean")
    ad.backward(scalar)
    g = leaf.grad[0]
    if pixel_mask is not None:
        g = g * np.asarray(pixel_mask, dtype=np.float64)
    return g


@dataclass(frozen=True)
class TrainConfig:
    """Episodic training hyperparameters (plain SGD, fixed step)."""

    episodes: int
    way: tuple[int, int] = (5, 5)
    shots: tuple[int, int] = (5, 5)
    queries: tuple[int, int] = (10, 10)
    learning_rate: float = 0.05


def episode_loss(weights: ModelWeights, support: LabeledSet, query: LabeledSet) -> float:
    """Mean query cross-entropy after adapting on the support set."""
    psi = adapt(weights, support)
    return loss(predict_logits(weights, psi, query.images), query.labels)


def meta_train(
    weights: ModelWeights,
    dataset: Dataset,
    cfg: TrainConfig,
    rng: np.random.Generator | int,
) -> tuple[ModelWeights, list[float]]:
    """Train by episodic SGD for cfg.episodes episodes; returns new weights.

    Deterministic for a fixed rng seed; raises NumericError if the episode
    loss ever becomes non-finite.
    """
    rng = np.random.default_rng(rng)
    work = {k: v.copy() for k, v in weights.tensors.items()}
    cfgn = weights.config
    losses: list[float] = []
    for k in range(cfg.episodes):
        way = int(rng.integers(cfg.way[0], cfg.way[1] + 1))
        shots = int(rng.integers(cfg.shots[0], cfg.shots[1] + 1))
        queries = int(rng.integers(cfg.queries[0], cfg.queries[1] + 1))
        task = sample_task(dataset, way, shots, queries, 0, rng)
        wt = {name: Tensor(arr, requires_grad=True) for name, arr in work.items()}
        film, protos = _adapt_graph(
            wt, cfgn, Tensor(task.support.images), task.support.labels, way
        )
        e_q = _embed_graph(wt, cfgn, Tensor(task.seed_query.images), film)
        scalar = ad.cross_entropy(ad.neg_sqdist(e_q, protos), task.seed_query.labels, "mean")
        value = float(scalar.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at episode {k}: {value}")
        ad.backward(scalar)
        for name, t in wt.items():
            if t.grad is not None:
                work[name] -= cfg.learning_rate * t.grad
        losses.append(value)
    out = {k: v for k, v in work.items()}
    for v in out.values():
        v.setflags(write=False)
    return ModelWeights(cfgn, out), losses


def standard_backbones(in_channels: int = 1, image_hw=(28, 28)) -> dict[str, NetConfig]:
    """The two stock desk-scale extractors: A adapts via FiLM, B has none."""
    common = dict(in_channels=in_channels, image_hw=tuple(image_hw), blocks=2, channels=16)
    return {
        "A": NetConfig(film=True, **common),
        "B": NetConfig(film=False, **common),
    }


# ---------------------------------------------------------------------------
# FSCK checkpoint format
# ---------------------------------------------------------------------------

def checkpoint_bytes(weights: ModelWeights) -> bytes:
    cfg = weights.config
    meta = np.asarray(
        [cfg.in_channels, cfg.image_hw[0], cfg.image_hw[1], cfg.blocks, cfg.channels, int(cfg.film)],
        dtype=np.float32,
    )
    entries = [(_META_NAME, meta)]
    for name in tensor_names(cfg):
        entries.append((name, weights.tensors[name].astype(np.float32)))
    parts = [FSCK_MAGIC, struct.pack("<II", FSCK_VERSION, len(entries))]
    for name, arr in entries:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(weights))


def checkpoint_from_bytes(blob: bytes) -> ModelWeights:
    if blob[:4] != FSCK_MAGIC:
        raise BadMagicError(f"expected magic {FSCK_MAGIC!r}, got {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedFileError(f"file ends at byte {len(blob)}, needed {off + n}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FSCK_VERSION:
        raise DataError(f"unsupported FSCK version {version}")
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        raw[name] = values.astype(np.float64)
    if off != len(blob):
        raise DataError(f"{len(blob) - off} trailing bytes in checkpoint")
    if _META_NAME not in raw:
        raise DataError("checkpoint missing meta tensor")
    meta = raw.pop(_META_NAME)
    cfg = NetConfig(
        in_channels=int(meta[0]),
        image_hw=(int(meta[1]), int(meta[2])),
        blocks=int(meta[3]),
        channels=int(meta[4]),
        film=bool(meta[5]),
    )
    expected = set(tensor_names(cfg))
    if set(raw) != expected:
        raise DataError(f"checkpoint tensors {sorted(raw)} do not match config")
    for v in raw.values():
        v.setflags(write=False)
    return ModelWeights(cfg, raw)


def load_checkpoint(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())

"""PGD-based attacks on the support and query sets of a few-shot task.

All attacks are sign-gradient ascent on the cross-entropy loss, projected
each step onto the valid intensity range and the l-infinity ball of radius
epsilon around the original pixels. Support poisoning differentiates the
seed-query loss through the full adaptation mechanism; the query / swap
family perturbs images against a frozen task state. Every attack is a pure
function of (weights, task, mask, config): randomness is derived from the
config seed keyed by image position and iteration, so attacking images
jointly or one at a time yields identical results.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import model as fm
from .errors import (
    BadMagicError,
    DataError,
    NumericError,
    TruncatedFileError,
)
from .model import DropoutSpec, ModelWeights
from .taskdata import I_MAX, I_MIN, LabeledSet, PoisonMask, Task

FSAS_MAGIC = b"FSAS"
FSAS_VERSION = 1

# Sub-stream tags for deriving per-image / per-iteration rngs from the seed.
_STREAM_INIT = 1
_STREAM_DROPOUT = 2
_STREAM_SHUFFLE = 3


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), int(stream), int(index)))


@dataclass(frozen=True)
class ShuffleConfig:
    """Clean-image rotation during support-poisoning generation."""

    clean_pool_ratio: float
    reshuffle_period: int

    def __post_init__(self):
        if self.clean_pool_ratio < 0:
            raise ValueError("clean_pool_ratio must be >= 0")
        if self.reshuffle_period < 1:
            raise ValueError("reshuffle_period must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    """Shared PGD parameters: radius, budget, step rule, and extras.

    Exactly one of step_coefficient (gamma = r * epsilon / iterations) or
    step_size (explicit gamma) must be given.
    """

    epsilon: float
    iterations: int
    step_coefficient: float | None = None
    step_size: float | None = None
    hot_start_fraction: float = 0.5
    shuffle: ShuffleConfig | None = None
    dropout: DropoutSpec = DropoutSpec()
    relabel: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if (self.step_coefficient is None) == (self.step_size is None):
            raise ValueError("set exactly one of step_coefficient / step_size")
        if not 0.0 <= self.hot_start_fraction <= 1.0:
            raise ValueError("hot_start_fraction must be in [0, 1]")
        if step_size(self) <= 0:
            raise ValueError("step size gamma must be > 0")


def step_size(cfg: AttackConfig) -> float:
    """PGD step gamma: r * epsilon / iterations, or the explicit override."""
    if cfg.step_size is not None:
        return float(cfg.step_size)
    return float(cfg.step_coefficient) * cfg.epsilon / cfg.iterations


@dataclass
class PerturbationState:
    """Current adversarial iterate for the pixels an attack may move."""

    original: np.ndarray
    adversarial: np.ndarray

    @staticmethod
    def init(original: np.ndarray, epsilon: float, seeds) -> "PerturbationState":
        """Uniform(-eps, eps) start, one independent draw per image."""
        adv = np.empty_like(original)
        for row, rng in enumerate(seeds):
            delta = rng.uniform(-epsilon, epsilon, original.shape[1:])
            adv[row] = np.clip(original[row] + delta, I_MIN, I_MAX)
        return PerturbationState(original.copy(), adv)

    def step(self, direction: np.ndarray, gamma: float, epsilon: float) -> None:
        adv = np.clip(self.adversarial + gamma * direction, I_MIN, I_MAX)
        adv = self.original + np.clip(adv - self.original, -epsilon, epsilon)
        # The ball projection can exceed the intensity bounds by one ulp in
        # floats even though it cannot in exact arithmetic; clamp it back.
        self.adversarial = np.clip(adv, I_MIN, I_MAX)


@dataclass(frozen=True)
class AdversarialSupport:
    """Perturbed support set plus the metadata needed to reuse it."""

    support: LabeledSet
    mask: PoisonMask
    config: AttackConfig
    surrogate_id: str
    iterations: int


def _check_finite(grad: np.ndarray, iteration: int, what: str) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite {what} gradient at iteration {iteration}")


def _dropout_film(psi, cfg: AttackConfig, iteration: int):
    """Per-iteration dropout-perturbed FiLM for fixed-state attacks."""
    if not cfg.dropout.active or psi.film is None:
        return None
    rng = _rng(cfg.seed, _STREAM_DROPOUT, iteration)
    return fm.apply_film_dropout(psi.film, cfg.dropout, rng)


def _pgd_fixed_state(
    weights: ModelWeights,
    psi,
    images: np.ndarray,
    labels: np.ndarray,
    positions: np.ndarray,
    cfg: AttackConfig,
    iters: int,
) -> np.ndarray:
    """Sign-gradient PGD on a batch of images against a frozen task state."""
    gamma = step_size(cfg)
    seeds = [_rng(cfg.seed, _STREAM_INIT, int(p)) for p in positions]
    state = PerturbationState.init(np.asarray(images), cfg.epsilon, seeds)
    for t in range(iters):
        film = _dropout_film(psi, cfg, t)
        grad = fm.grad_query_batch(weights, psi, state.adversarial, labels, film=film)
        _check_finite(grad, t, "query")
        state.step(np.sign(grad), gamma, cfg.epsilon)
    return state.adversarial


def pgd_query(
    weights: ModelWeights,
    task: Task,
    targets,
    cfg: AttackConfig,
) -> LabeledSet:
    """Perturb the given seed-query images against the clean-support state."""
    targets = np.asarray(targets, dtype=np.int64)
    psi = fm.adapt(weights, task.support)
    perturbed = _pgd_fixed_state(
        weights,
        psi,
        task.seed_query.images[targets],
        task.seed_query.labels[targets],
        targets,
        cfg,
        cfg.iterations,
    )
    images = task.seed_query.images.copy()
    images[targets] = perturbed
    return task.seed_query.replace_images(images)


def _finish(task: Task, mask: PoisonMask, perturbed: np.ndarray, cfg, weights, iterations):
    images = task.support.images.copy()
    images[mask.as_array()] = perturbed
    support = LabeledSet(images, task.support.labels, task.support.ids)
    return AdversarialSupport(support, mask, cfg, weights.fingerprint(), iterations)


def _asp_iterate(
    weights: ModelWeights,
    task: Task,
    mask: PoisonMask,
    cfg: AttackConfig,
    state: PerturbationState,
    iters: int,
    iteration_offset: int = 0,
) -> None:
    """Run support-poisoning PGD iterations in place on the given state."""
    gamma = step_size(cfg)
    idx = mask.as_array()
    for t in range(iters):
        images = task.support.images.copy()
        images[idx] = state.adversarial
        support_t = LabeledSet(images, task.support.labels, task.support.ids)
        rng_t = _rng(cfg.seed, _STREAM_DROPOUT, iteration_offset + t)
        grad = fm.grad_support(weights, support_t, mask, task.seed_query, cfg.dropout, rng_t)
        _check_finite(grad, iteration_offset + t, "support")
        state.step(np.sign(grad[idx]), gamma, cfg.epsilon)


def asp(
    weights: ModelWeights,
    task: Task,
    mask: PoisonMask,
    cfg: AttackConfig,
) -> AdversarialSupport:
    """Adversarial support poisoning: joint PGD through the adaptation.

    Each iteration re-adapts on the current perturbed support, takes the sign
    of the seed-query loss gradient with respect to the masked support pixels,
    steps by gamma, and projects back onto the intensity range and the
    epsilon ball around the original support.
    """
    if len(mask) == 0:
        raise ValueError("poison mask is empty")
    if len(task.seed_query) == 0:
        raise ValueError("seed query set is empty")
    idx = mask.as_array()
    seeds = [_rng(cfg.seed, _STREAM_INIT, int(p)) for p in idx]
    state = PerturbationState.init(task.support.images[idx], cfg.epsilon, seeds)
    _asp_iterate(weights, task, mask, cfg, state, cfg.iterations)
    return _finish(task, mask, state.adversarial, cfg, weights, cfg.iterations)


def swap_attack(
    weights: ModelWeights,
    task: Task,
    mask: PoisonMask,
    cfg: AttackConfig,
) -> AdversarialSupport:
    """Baseline: query-attack the masked support images, then swap them back.

    The masked images are perturbed independently as if they were queries
    against the state adapted from the clean support, then re-inserted at
    their original positions with their original labels.
    """
    if len(mask) == 0:
        raise ValueError("poison mask is empty")
    idx = mask.as_array()
    psi = fm.adapt(weights, task.support)
    perturbed = _pgd_fixed_state(
        weights,
        psi,
        task.support.images[idx],
        task.support.labels[idx],
        idx,
        cfg,
        cfg.iterations,
    )
    return _finish(task, mask, perturbed, cfg, weights, cfg.iterations)


def hot_start_asp(
    weights: ModelWeights,
    task: Task,
    mask: PoisonMask,
    cfg: AttackConfig,
) -> AdversarialSupport:
    """Support poisoning warm-started from a query attack on the same images.

    Phase 1 spends floor(iterations * hot_start_fraction) steps on the swap
    construction; phase 2 continues with support-poisoning steps from that
    iterate (no fresh random start), measuring the epsilon ball from the
    original support throughout.
    """
    if cfg.iterations < 2:
        raise ValueError("hot start needs an iteration budget of at least 2")
    phase1 = int(cfg.iterations * cfg.hot_start_fraction)
    phase2 = cfg.iterations - phase1
    idx = mask.as_array()
    if phase1 == 0:
        return asp(weights, task, mask, cfg)
    psi = fm.adapt(weights, task.support)
    warm = _pgd_fixed_state(
        weights,
        psi,
        task.support.images[idx],
        task.support.labels[idx],
        idx,
        cfg,
        phase1,
    )
    state = PerturbationState(task.support.images[idx].copy(), warm)
    _asp_iterate(weights, task, mask, cfg, state, phase2, iteration_offset=phase1)
    return _finish(task, mask, state.adversarial, cfg, weights, phase1 + phase2)


def _round_half_even(x: float) -> int:
    return int(round(x))


def asp_with_shuffle(
    weights: ModelWeights,
    task: Task,
    mask: PoisonMask,
    clean_pool: LabeledSet,
    cfg: AttackConfig,
) -> AdversarialSupport:
    """Support poisoning with the clean context redrawn during generation.

    The poisoned images are fixed; every reshuffle_period iterations the
    clean portion of the generation support is redrawn from clean_pool at
    clean_pool_ratio images per poisoned image, allocated per class. The
    returned support pairs the perturbed poisoned images with the task's
    original clean support.
    """
    if cfg.shuffle is None:
        raise ValueError("asp_with_shuffle requires cfg.shuffle")
    if len(mask) == 0:
        raise ValueError("poison mask is empty")
    idx = mask.as_array()
    masked_labels = task.support.labels[idx]
    pool_rows: dict[int, np.ndarray] = {}
    draw_counts: dict[int, int] = {}
    for c in range(task.way):
        n_masked = int((masked_labels == c).sum())
        if n_masked == 0:
            raise DataError(
                f"shuffle generation requires a poisoned shot in every class; class {c} has none"
            )
        want = _round_half_even(cfg.shuffle.clean_pool_ratio * n_masked)
        have = np.flatnonzero(clean_pool.labels == c)
        if len(have) < want:
            raise DataError(
                f"clean pool has {len(have)} images of class {c}, shuffle needs {want}"
            )
        pool_rows[c] = have
        draw_counts[c] = want

    gamma = step_size(cfg)
    seeds = [_rng(cfg.seed, _STREAM_INIT, int(p)) for p in idx]
    state = PerturbationState.init(task.support.images[idx], cfg.epsilon, seeds)
    clean_images = clean_labels = None
    draw_index = 0
    for t in range(cfg.iterations):
        if t % cfg.shuffle.reshuffle_period == 0:
            rng_draw = _rng(cfg.seed, _STREAM_SHUFFLE, draw_index)
            draw_index += 1
            rows = []
            for c in range(task.way):
                if draw_counts[c]:
                    rows.extend(rng_draw.choice(pool_rows[c], size=draw_counts[c], replace=False))
            rows = np.asarray(rows, dtype=np.int64)
            clean_images = clean_pool.images[rows] if len(rows) else np.empty((0, *task.support.images.shape[1:]))
            clean_labels = clean_pool.labels[rows] if len(rows) else np.empty((0,), dtype=np.int64)
        gen_images = np.concatenate([state.adversarial, clean_images])
        gen_labels = np.concatenate([masked_labels, clean_labels])
        gen_support = LabeledSet(gen_images, gen_labels)
        gen_mask = PoisonMask(tuple(range(len(idx))))
        rng_t = _rng(cfg.seed, _STREAM_DROPOUT, t)
        grad = fm.grad_support(weights, gen_support, gen_mask, task.seed_query, cfg.dropout, rng_t)
        _check_finite(grad, t, "support")
        state.step(np.sign(grad[: len(idx)]), gamma, cfg.epsilon)
    return _finish(task, mask, state.adversarial, cfg, weights, cfg.iterations)


def relabel_support(target_weights: ModelWeights, task: Task) -> LabeledSet:
    """Relabel the support with the target model's own predictions.

    The target adapts on the clean support with true labels; its argmax
    predictions on those same support images become the labels a surrogate
    will see during attack generation. Images are unchanged.
    """
    psi = fm.adapt(target_weights, task.support)
    predicted = fm.predict_classes(target_weights, psi, task.support.images)
    return LabeledSet(task.support.images, predicted, task.support.ids)


# ---------------------------------------------------------------------------
# FSAS serialization (adversarial supports reusable across runs)
# ---------------------------------------------------------------------------

def config_to_dict(cfg: AttackConfig) -> dict:
    out = asdict(cfg)
    out["dropout"] = {"strategy": cfg.dropout.strategy, "rate": cfg.dropout.rate}
    if cfg.shuffle is not None:
        out["shuffle"] = {
            "clean_pool_ratio": cfg.shuffle.clean_pool_ratio,
            "reshuffle_period": cfg.shuffle.reshuffle_period,
        }
    return out


def config_from_dict(data: dict) -> AttackConfig:
    data = dict(data)
    data["dropout"] = DropoutSpec(**data.get("dropout", {"strategy": "none", "rate": 0.0}))
    if data.get("shuffle") is not None:
        data["shuffle"] = ShuffleConfig(**data["shuffle"])
    return AttackConfig(**data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def adversarial_support_bytes(adv: AdversarialSupport, extra: dict | None = None) -> bytes:
    n, ch, h, w = adv.support.images.shape
    meta = {
        "config": config_to_dict(adv.config),
        "surrogate": adv.surrogate_id,
        "iterations": adv.iterations,
        "extra": extra or {},
    }
    blob = canonical_json(meta).encode("utf-8")
    parts = [
        FSAS_MAGIC,
        struct.pack("<IIIII", FSAS_VERSION, n, ch, h, w),
        np.asarray(adv.support.labels, dtype="<u4").tobytes(),
        np.ascontiguousarray(adv.support.images, dtype="<f8").tobytes(),
        struct.pack("<I", len(adv.mask)),
        np.asarray(adv.mask.indices, dtype="<u4").tobytes(),
        struct.pack("<I", len(blob)),
        blob,
    ]
    return b"".join(parts)


def save_adversarial_support(adv: AdversarialSupport, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(adversarial_support_bytes(adv, extra))


def adversarial_support_from_bytes(blob: bytes) -> tuple[AdversarialSupport, dict]:
    if blob[:4] != FSAS_MAGIC:
        raise BadMagicError(f"expected magic {FSAS_MAGIC!r}, got {blob[:4]!r}")
    off = 4

    def take(nbytes: int) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise TruncatedFileError(f"file ends at byte {len(blob)}, needed {off + nbytes}")
        chunk = blob[off:off + nbytes]
        off += nbytes
        return chunk

    version, n, ch, h, w = struct.unpack("<IIIII", take(20))
    if version != FSAS_VERSION:
        raise DataError(f"unsupported FSAS version {version}")
    labels = np.frombuffer(take(4 * n), dtype="<u4").astype(np.int64)
    images = np.frombuffer(take(8 * n * ch * h * w), dtype="<f8").reshape(n, ch, h, w)
    (mask_len,) = struct.unpack("<I", take(4))
    mask = PoisonMask(tuple(np.frombuffer(take(4 * mask_len), dtype="<u4").tolist()))
    (json_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(json_len).decode("utf-8"))
    if off != len(blob):
        raise DataError(f"{len(blob) - off} trailing bytes in attack artifact")
    adv = AdversarialSupport(
        support=LabeledSet(images, labels),
        mask=mask,
        config=config_from_dict(meta["config"]),
        surrogate_id=meta["surrogate"],
        iterations=int(meta["iterations"]),
    )
    return adv, meta.get("extra", {})


def load_adversarial_support(path) -> tuple[AdversarialSupport, dict]:
    with open(path, "rb") as fh:
        return adversarial_support_from_bytes(fh.read())

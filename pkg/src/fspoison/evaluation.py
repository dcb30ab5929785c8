"""Measurement protocol: accuracies, aggregation, and experiment runners.

A white-box run samples tasks, generates support attacks on one model, and
measures clean / specific (seed query) / general (unseen query sets) / swap
accuracies. A transfer run generates every attack once on the surrogate and
evaluates the same adversarial supports on each target model, optionally
with mitigation variants (relabeled generation, hot start, clean-image
shuffling). Per-task seeds derive from (master seed, task index), so
reports are identical regardless of worker scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import attacks as atk
from . import model as fm
from .attacks import AdversarialSupport, AttackConfig
from .errors import DataError, NumericError
from .model import ModelWeights
from .taskdata import Dataset, LabeledSet, Task, make_poison_mask, sample_task

log = logging.getLogger("fspoison.evaluation")

_S_TASK = 11
_S_MASK = 12
_S_ATTACK = 13

SURROGATE = "surrogate"


def accuracy(weights: ModelWeights, support: LabeledSet, query_set: LabeledSet) -> float:
    """Top-1 accuracy after adapting on the support (ties -> lowest class)."""
    psi = fm.adapt(weights, support)
    predicted = fm.predict_classes(weights, psi, query_set.images)
    return float((predicted == query_set.labels).mean())


def relative_drop(a_clean: float, a_attack: float) -> float | None:
    """Percent drop 100 * (a_clean - a_attack) / a_clean; None if undefined."""
    if a_clean <= 0:
        return None
    return 100.0 * (a_clean - a_attack) / a_clean


@dataclass(frozen=True)
class AggregateStat:
    mean: float
    ci95: float | None  # 1.96 * sample std / sqrt(n); None when n < 2
    n: int


def mean_ci95(values) -> AggregateStat:
    """Normal-approximation mean and 95% half-width over per-task values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        raise ValueError(f"need at least 2 values for a confidence interval, got {arr.size}")
    half = 1.96 * arr.std(ddof=1) / np.sqrt(arr.size)
    return AggregateStat(float(arr.mean()), float(half), int(arr.size))


def _aggregate(values) -> AggregateStat:
    arr = list(values)
    if len(arr) == 1:
        return AggregateStat(float(arr[0]), None, 1)
    return mean_ci95(arr)


@dataclass(frozen=True)
class AccuracyRecord:
    """Per-task accuracies in the style of the headline result tables."""

    task_id: int
    a_clean: float
    a_specific: float
    a_general: float
    per_eval_set: tuple[float, ...]
    a_swap: float | None = None


def _psi_accuracies(weights, psi, sets) -> list[float]:
    out = []
    for qs in sets:
        predicted = fm.predict_classes(weights, psi, qs.images)
        out.append(float((predicted == qs.labels).mean()))
    return out


def _presented_support(task: Task, adv: AdversarialSupport) -> LabeledSet:
    # The victim always sees its own (true) labels; only pixels are attacked.
    return LabeledSet(adv.support.images, task.support.labels, task.support.ids)


def eval_attack(
    target_weights: ModelWeights,
    task: Task,
    adv: AdversarialSupport,
    task_id: int = 0,
) -> AccuracyRecord:
    """Clean / specific / general accuracies of one adversarial support.

    The target adapts independently on the clean and on the adversarial
    support; specific is measured on the seed query set, general is the mean
    accuracy over the task's unseen eval query sets, and clean is the same
    mean under the unperturbed support.
    """
    if not task.eval_queries:
        raise DataError("task has no eval query sets")
    psi_clean = fm.adapt(target_weights, task.support)
    psi_adv = fm.adapt(target_weights, _presented_support(task, adv))
    clean_sets = _psi_accuracies(target_weights, psi_clean, task.eval_queries)
    adv_sets = _psi_accuracies(target_weights, psi_adv, task.eval_queries)
    specific = _psi_accuracies(target_weights, psi_adv, [task.seed_query])[0]
    return AccuracyRecord(
        task_id=task_id,
        a_clean=float(np.mean(clean_sets)),
        a_specific=specific,
        a_general=float(np.mean(adv_sets)),
        per_eval_set=tuple(adv_sets),
    )


# ---------------------------------------------------------------------------
# Scenario configuration and runners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeShape:
    way: int = 5
    shots: int = 5
    queries: int = 10
    eval_sets: int = 5


@dataclass(frozen=True)
class MitigationConfig:
    relabel: bool = False
    hot_start: bool = False
    shuffle: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one experiment needs, with in-memory models and data."""

    name: str
    dataset: Dataset
    surrogate: ModelWeights
    attack: AttackConfig
    poison_fraction: float
    tasks: int
    episode: EpisodeShape = EpisodeShape()
    targets: dict[str, ModelWeights] = field(default_factory=dict)
    seed: int = 0
    mitigations: MitigationConfig = MitigationConfig()

    def config_hash(self) -> str:
        desc = {
            "name": self.name,
            "dataset": self.dataset.provenance,
            "surrogate": self.surrogate.fingerprint(),
            "targets": {k: w.fingerprint() for k, w in sorted(self.targets.items())},
            "attack": atk.config_to_dict(self.attack),
            "poison_fraction": self.poison_fraction,
            "tasks": self.tasks,
            "episode": [self.episode.way, self.episode.shots, self.episode.queries, self.episode.eval_sets],
            "seed": self.seed,
            "mitigations": [self.mitigations.relabel, self.mitigations.hot_start, self.mitigations.shuffle],
        }
        return hashlib.sha256(atk.canonical_json(desc).encode()).hexdigest()[:16]


def _task_attack_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((master_seed, _S_ATTACK, index)).generate_state(1)[0])


def _sample_scenario_task(scenario: ScenarioConfig, index: int) -> Task:
    rng = np.random.default_rng((scenario.seed, _S_TASK, index))
    ep = scenario.episode
    return sample_task(scenario.dataset, ep.way, ep.shots, ep.queries, ep.eval_sets, rng)


def _generate_variants(scenario: ScenarioConfig, task: Task, mask, cfg) -> dict[str, AdversarialSupport]:
    variants = {
        "asp": atk.asp(scenario.surrogate, task, mask, cfg),
        "swap": atk.swap_attack(scenario.surrogate, task, mask, cfg),
    }
    if scenario.mitigations.hot_start:
        variants["hot_start"] = atk.hot_start_asp(scenario.surrogate, task, mask, cfg)
    if scenario.mitigations.shuffle:
        if cfg.shuffle is None:
            raise ValueError("shuffle mitigation requires attack.shuffle settings")
        unmasked = np.setdiff1d(np.arange(len(task.support)), mask.as_array())
        pool = task.support.subset(unmasked)
        variants["asp_shuffle"] = atk.asp_with_shuffle(scenario.surrogate, task, mask, pool, cfg)
    return variants


def _task_record(scenario: ScenarioConfig, index: int) -> dict:
    task = _sample_scenario_task(scenario, index)
    mask = make_poison_mask(
        task, scenario.poison_fraction, np.random.default_rng((scenario.seed, _S_MASK, index))
    )
    cfg = replace(scenario.attack, seed=_task_attack_seed(scenario.seed, index))
    variants = _generate_variants(scenario, task, mask, cfg)
    if scenario.mitigations.relabel:
        if len(scenario.targets) != 1:
            raise ValueError("relabel mitigation expects exactly one target model")
        target_w = next(iter(scenario.targets.values()))
        realigned_task = task.with_support(atk.relabel_support(target_w, task))
        for name, adv in _generate_variants(scenario, realigned_task, mask, cfg).items():
            variants[f"{name}_realigned"] = adv
    models = {SURROGATE: scenario.surrogate, **scenario.targets}
    record: dict = {"task": index, "models": {}}
    for model_name, weights in models.items():
        entry: dict = {"attacks": {}}
        psi_clean = fm.adapt(weights, task.support)
        clean_sets = _psi_accuracies(weights, psi_clean, task.eval_queries)
        entry["clean"] = float(np.mean(clean_sets))
        entry["clean_per_set"] = clean_sets
        for attack_name, adv in variants.items():
            psi_adv = fm.adapt(weights, _presented_support(task, adv))
            adv_sets = _psi_accuracies(weights, psi_adv, task.eval_queries)
            entry["attacks"][attack_name] = {
                "specific": _psi_accuracies(weights, psi_adv, [task.seed_query])[0],
                "general": float(np.mean(adv_sets)),
                "per_set": adv_sets,
            }
        record["models"][model_name] = entry
    return record


_WORKER_SCENARIO: ScenarioConfig | None = None


def _init_worker(scenario: ScenarioConfig) -> None:
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = scenario


def _worker_run(index: int):
    try:
        return index, _task_record(_WORKER_SCENARIO, index)
    except (NumericError, DataError) as exc:
        return index, {"error": f"{type(exc).__name__}: {exc}"}


@dataclass
class ExperimentReport:
    """Aggregated experiment results plus full per-task records."""

    scenario: str
    config_hash: str
    seed: int
    n_tasks: int
    failures: int
    records: list[dict]
    aggregates: dict[tuple[str, str, str], AggregateStat]
    drops: dict[tuple[str, str, str], float | None]
    timestamp: str

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_tasks": self.n_tasks,
            "failures": self.failures,
            "records": self.records,
            "aggregates": [
                {
                    "attack": a,
                    "target": t,
                    "metric": m,
                    "mean": stat.mean,
                    "ci95": stat.ci95,
                    "n": stat.n,
                }
                for (a, t, m), stat in sorted(self.aggregates.items())
            ],
            "relative_drops": [
                {"attack": a, "target": t, "metric": m, "percent": value}
                for (a, t, m), value in sorted(self.drops.items())
            ],
            "timestamp": self.timestamp,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        lines = ["scenario,attack,target,metric,mean,ci95,n"]
        for (a, t, m), stat in sorted(self.aggregates.items()):
            ci = "" if stat.ci95 is None else f"{stat.ci95:.6f}"
            lines.append(f"{self.scenario},{a},{t},{m},{stat.mean:.6f},{ci},{stat.n}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def stat(self, attack: str, target: str, metric: str) -> AggregateStat:
        return self.aggregates[(attack, target, metric)]

    def drop(self, attack: str, target: str, metric: str) -> float | None:
        return self.drops[(attack, target, metric)]


def _build_report(scenario: ScenarioConfig, outcomes: list[tuple[int, dict]]) -> ExperimentReport:
    records = []
    failures = 0
    for index, rec in sorted(outcomes):
        if "error" in rec:
            failures += 1
            log.warning("task %d failed: %s", index, rec["error"])
        else:
            records.append(rec)
    aggregates: dict[tuple[str, str, str], AggregateStat] = {}
    drops: dict[tuple[str, str, str], float | None] = {}
    if records:
        model_names = records[0]["models"].keys()
        for model_name in model_names:
            clean_values = [r["models"][model_name]["clean"] for r in records]
            aggregates[("clean", model_name, "accuracy")] = _aggregate(clean_values)
            clean_mean = aggregates[("clean", model_name, "accuracy")].mean
            for attack_name in records[0]["models"][model_name]["attacks"]:
                for metric in ("specific", "general"):
                    values = [
                        r["models"][model_name]["attacks"][attack_name][metric] for r in records
                    ]
                    aggregates[(attack_name, model_name, metric)] = _aggregate(values)
                    drops[(attack_name, model_name, metric)] = relative_drop(
                        clean_mean, aggregates[(attack_name, model_name, metric)].mean
                    )
    return ExperimentReport(
        scenario=scenario.name,
        config_hash=scenario.config_hash(),
        seed=scenario.seed,
        n_tasks=len(records),
        failures=failures,
        records=records,
        aggregates=aggregates,
        drops=drops,
        timestamp=datetime.now(timezone.utc).isoformat(),
    )


def _run_scenario(scenario: ScenarioConfig, workers: int = 1) -> ExperimentReport:
    outcomes: list[tuple[int, dict]] = []
    if workers <= 1:
        for i in range(scenario.tasks):
            try:
                outcomes.append((i, _task_record(scenario, i)))
            except (NumericError, DataError) as exc:
                outcomes.append((i, {"error": f"{type(exc).__name__}: {exc}"}))
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(scenario,)
        ) as pool:
            outcomes = list(pool.map(_worker_run, range(scenario.tasks)))
    return _build_report(scenario, outcomes)


def run_white_box(scenario: ScenarioConfig, workers: int = 1) -> ExperimentReport:
    """Clean vs specific/general/swap on the attack-generation model itself."""
    if scenario.targets:
        scenario = replace(scenario, targets={})
    return _run_scenario(scenario, workers)


def run_transfer(scenario: ScenarioConfig, workers: int = 1) -> ExperimentReport:
    """Attack on the surrogate, evaluate the same supports on every target."""
    if not scenario.targets:
        raise ValueError("transfer scenario needs at least one target model")
    return _run_scenario(scenario, workers)

"""Desk-scale laboratory for support-set poisoning of few-shot learners."""

from .attacks import (
    AdversarialSupport,
    AttackConfig,
    ShuffleConfig,
    asp,
    asp_with_shuffle,
    hot_start_asp,
    load_adversarial_support,
    pgd_query,
    relabel_support,
    save_adversarial_support,
    step_size,
    swap_attack,
)
from .evaluation import (
    AccuracyRecord,
    AggregateStat,
    EpisodeShape,
    ExperimentReport,
    MitigationConfig,
    ScenarioConfig,
    accuracy,
    eval_attack,
    mean_ci95,
    relative_drop,
    run_transfer,
    run_white_box,
)
from .model import (
    DropoutSpec,
    FiLMParams,
    ModelWeights,
    NetConfig,
    TaskParams,
    TrainConfig,
    adapt,
    apply_film_dropout,
    embed,
    grad_query,
    grad_support,
    init_weights,
    load_checkpoint,
    loss,
    meta_train,
    predict_logits,
    save_checkpoint,
    standard_backbones,
)
from .taskdata import (
    Dataset,
    LabeledSet,
    PoisonMask,
    SyntheticSpec,
    Task,
    generate_synthetic_dataset,
    load_dataset,
    make_poison_mask,
    sample_task,
    save_dataset,
)

__version__ = "0.1.0"

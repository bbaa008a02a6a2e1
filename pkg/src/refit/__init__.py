"""Reward-weighted fine-tuning (ReFit) and its standardized variant (SWiFt) on
small conversational tasks, with exact oracles for the offline-to-online bounds.
"""
from .core import (
    Dataset,
    LoggedExample,
    SchemaError,
    Step,
    TaskInstance,
    Trajectory,
    ValidationError,
    derive_rng,
    read_dataset,
    write_dataset,
)
from .datagen import DatagenConfig, attach_standardized, generate_dataset, rollout, shift_rewards
from .env import EnumerationTooLarge, HiddenIntentQA, ScriptedExamQA, make_env, reference_instance
from .evalreport import ComparisonTable, EvalMetrics, compare, emit_report, evaluate
from .objectives import (
    BoundReport,
    exact_ips_value,
    exact_value,
    gradient_variance,
    ips_value,
    offline_objective,
    verify_lemma1,
    verify_lemma3,
)
from .policy import LinearFeatures, PolicyParams, trajectory_logprob
from .reward import RewardSpec, standardize_group, trajectory_reward
from .trainers import (
    ALGORITHMS,
    TrainConfig,
    TrainResult,
    train_dpo,
    train_refit,
    train_sft,
    train_step_dpo,
    train_swift,
    train_threshold_sft,
)

__version__ = "0.1.0"

"""Reward-weighted fine-tuning (raw and standardized) and baseline trainers.

Every trainer runs the same loop: shuffle the training items once per epoch
with the config seed, then take one ascent step ``theta += alpha_i * g_i``
per item. Only the per-item gradient ``g_i`` differs between methods.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, LoggedExample, Step, TaskInstance, Trajectory, ValidationError, derive_rng, group_by_task
from .datagen import rollout
from .objectives import grad_example, offline_objective
from .policy import (
    HistoryState,
    PolicyParams,
    action_logprob,
    add_grad_action_logprob,
    grad_action_logprob,
    history_states,
    sample_action,
    trajectory_action_grad,
)

ALGORITHMS = ("refit", "swift", "threshold-sft", "dpo", "step-dpo")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 0.5
    lr_schedule: str = "inverse_sqrt"  # or "constant"
    seed: int = 0
    reward_mode: str = "raw"  # or "standardized"
    grad_clip: Optional[float] = None
    dpo_beta: float = 1.0
    threshold_rule: str = "best_per_group"
    optimizer: str = "sgd"  # "adam" replicates adaptive-optimizer training
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.lr_schedule not in ("constant", "inverse_sqrt"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.reward_mode not in ("raw", "standardized"):
            raise ValidationError(f"unknown reward_mode {self.reward_mode!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValidationError("grad_clip must be > 0")
        if not self.dpo_beta > 0:
            raise ValidationError("dpo_beta must be > 0")
        if self.threshold_rule != "best_per_group":
            raise ValidationError(f"unknown threshold_rule {self.threshold_rule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def alpha(self, i: int) -> float:
        """Step size of update ``i`` (counting from 1)."""
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr / math.sqrt(i)


@dataclass
class TrainResult:
    params: PolicyParams
    objective_trace: list = field(default_factory=list)
    value_trace: Optional[list] = None
    updates: int = 0
    skipped: int = 0


@dataclass(frozen=True)
class PreferencePair:
    """Winner/loser trajectories of one task.

    ``step`` is None for trajectory-level pairs. For step-level pairs both
    trajectories share the prefix before ``step`` and only the action taken
    at ``step`` enters the loss.
    """

    task: TaskInstance
    winner: Trajectory
    loser: Trajectory
    winner_reward: float
    loser_reward: float
    step: Optional[int] = None

    def __post_init__(self):
        if self.winner_reward < self.loser_reward:
            raise ValidationError("winner reward below loser reward")
        if self.winner == self.loser:
            raise ValidationError("winner and loser trajectories are identical")

    def scope(self, traj: Trajectory):
        """(state, action) pairs whose log-probs enter the preference loss."""
        pairs = list(zip(history_states(self.task, traj), traj.actions))
        return pairs if self.step is None else [pairs[self.step]]


# --- the shared loop -----------------------------------------------------------


def _run(
    params: PolicyParams,
    items: Sequence,
    grad_fn: Callable,
    cfg: TrainConfig,
    objective_fn: Callable,
    value_fn: Optional[Callable] = None,
) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    theta = params.values.copy()
    current = params
    i = 1
    skipped = 0
    adam_m = adam_v = None
    if cfg.optimizer == "adam":
        adam_m = np.zeros_like(theta)
        adam_v = np.zeros_like(theta)
    objectives, values = [], ([] if value_fn is not None else None)
    for epoch in range(cfg.epochs):
        for k in rng.permutation(len(items)):
            g = grad_fn(current, items[k])
            if g is None:
                skipped += 1
                i += 1
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient at update {i} (epoch {epoch}, item {k})")
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(g))
                if norm > cfg.grad_clip:
                    g = g * (cfg.grad_clip / norm)
            if adam_m is not None:
                b1, b2 = cfg.adam_betas
                adam_m = b1 * adam_m + (1 - b1) * g
                adam_v = b2 * adam_v + (1 - b2) * g * g
                step = (adam_m / (1 - b1**i)) / (np.sqrt(adam_v / (1 - b2**i)) + cfg.adam_eps)
                theta = theta + cfg.alpha(i) * step
            else:
                with np.errstate(over="ignore"):
                    theta = theta + cfg.alpha(i) * g
            if not np.all(np.isfinite(theta)):
                raise TrainingError(
                    f"parameters became non-finite at update {i} (epoch {epoch}, item {k}); "
                    "lower lr or set grad_clip"
                )
            current = params.with_values(theta)
            i += 1
        objectives.append(objective_fn(current))
        if value_fn is not None:
            values.append(value_fn(current))
    return TrainResult(current, objectives, values, updates=i - 1 - skipped, skipped=skipped)


# --- ReFit / SWiFt ---------------------------------------------------------


def _weighted_grad(use_standardized: bool):
    def grad(params, ex: LoggedExample):
        if ex.weight(use_standardized) == 0.0:
            return np.zeros(params.values.size)
        return grad_example(params, ex, use_standardized)

    return grad


def train_refit(params_init: PolicyParams, dataset: Dataset, cfg: TrainConfig, value_fn=None) -> TrainResult:
    """Reward-weighted fine-tuning on raw rewards."""
    if cfg.reward_mode != "raw":
        raise ValidationError("train_refit needs reward_mode = 'raw'")
    _check_dims(params_init, dataset)
    return _run(
        params_init,
        dataset.examples,
        _weighted_grad(False),
        cfg,
        lambda p: offline_objective(p, dataset, False),
        value_fn,
    )


def train_swift(params_init: PolicyParams, dataset: Dataset, cfg: TrainConfig, value_fn=None) -> TrainResult:
    """Reward-weighted fine-tuning on per-group standardized rewards."""
    if cfg.reward_mode != "standardized":
        raise ValidationError("train_swift needs reward_mode = 'standardized'")
    if not dataset.is_standardized:
        raise ValidationError("dataset has no standardized rewards; run attach_standardized first")
    _check_dims(params_init, dataset)
    return _run(
        params_init,
        dataset.examples,
        _weighted_grad(True),
        cfg,
        lambda p: offline_objective(p, dataset, True),
        value_fn,
    )


def _check_dims(params: PolicyParams, dataset: Dataset):
    for ex in dataset:
        for s in ex.trajectory.steps:
            if s.action >= params.n_actions:
                raise ValidationError(f"logged action {s.action} outside the policy's {params.n_actions} actions")


# --- plain SFT ---------------------------------------------------------------


def sft_batches(dataset: Dataset) -> list[list[tuple[HistoryState, int]]]:
    """One batch of (state, action) items per logged trajectory."""
    return [list(zip(history_states(ex.task, ex.trajectory), ex.trajectory.actions)) for ex in dataset]


def train_sft(params_init: PolicyParams, batches, cfg: TrainConfig) -> TrainResult:
    """Unweighted SFT: one step per batch on the summed log-likelihood gradient."""

    def grad(params, batch):
        g = np.zeros(params.values.size)
        for state, a in batch:
            g += grad_action_logprob(params, state, a)
        return g

    def objective(params):
        return math.fsum(action_logprob(params, s, a) for b in batches for s, a in b) / max(len(batches), 1)

    return _run(params_init, list(batches), grad, cfg, objective)


# --- threshold SFT -----------------------------------------------------------


def select_best_per_group(dataset: Dataset) -> Dataset:
    """Highest-reward rollout of each group; ties go to the earliest rollout."""
    chosen = []
    for group in group_by_task(dataset).values():
        best = group[0]
        for ex in group[1:]:
            if ex.reward_raw > best.reward_raw:
                best = ex
        chosen.append(best)
    return dataset.replace_examples(chosen)


def train_threshold_sft(params_init: PolicyParams, dataset: Dataset, cfg: TrainConfig, value_fn=None) -> TrainResult:
    """SFT with weight 1 on the best rollout of each group."""
    selected = select_best_per_group(dataset)
    unit = selected.replace_examples(ex.replace(reward_raw=1.0, reward_std=None) for ex in selected)
    _check_dims(params_init, unit)
    return _run(
        params_init,
        unit.examples,
        _weighted_grad(False),
        cfg,
        lambda p: offline_objective(p, unit, False),
        value_fn,
    )


# --- DPO ---------------------------------------------------------------------


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _log_sigmoid(z: float) -> float:
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


def _scoped_logprob(params, pair: PreferencePair, traj: Trajectory) -> float:
    return math.fsum(action_logprob(params, s, a) for s, a in pair.scope(traj))


def implicit_reward(params, ref, pair: PreferencePair, traj: Trajectory, beta: float) -> float:
    """beta * (log pi - log pi_ref) over the pair's scoped actions."""
    return beta * (_scoped_logprob(params, pair, traj) - _scoped_logprob(ref, pair, traj))


def dpo_loss(params, ref, pair: PreferencePair, beta: float) -> float:
    """-log sigmoid(r_hat(winner) - r_hat(loser))."""
    margin = implicit_reward(params, ref, pair, pair.winner, beta) - implicit_reward(params, ref, pair, pair.loser, beta)
    return -_log_sigmoid(margin)


def dpo_gradient(params: PolicyParams, ref: PolicyParams, pair: PreferencePair, beta: float) -> np.ndarray:
    """Ascent direction beta * sigmoid(r_l - r_w) * (grad log pi_w - grad log pi_l)."""
    r_w = implicit_reward(params, ref, pair, pair.winner, beta)
    r_l = implicit_reward(params, ref, pair, pair.loser, beta)
    coef = beta * _sigmoid(r_l - r_w)
    g = np.zeros(params.values.size)
    for s, a in pair.scope(pair.winner):
        add_grad_action_logprob(params, s, a, coef, g)
    for s, a in pair.scope(pair.loser):
        add_grad_action_logprob(params, s, a, -coef, g)
    return g


def build_dpo_pairs(dataset: Dataset) -> list[PreferencePair]:
    """(best, worst) final trajectories per group; all-equal groups skipped.

    Raises if no group yields a pair.
    """
    pairs, skipped = [], []
    for gid, group in group_by_task(dataset).items():
        best = worst = group[0]
        for ex in group[1:]:
            if ex.reward_raw > best.reward_raw:
                best = ex
            if ex.reward_raw < worst.reward_raw:
                worst = ex
        if best.reward_raw == worst.reward_raw or best.trajectory == worst.trajectory:
            skipped.append(gid)
            continue
        pairs.append(PreferencePair(best.task, best.trajectory, worst.trajectory, best.reward_raw, worst.reward_raw))
    if not pairs:
        raise ValidationError(f"no group has two rollouts with different rewards: {skipped}")
    return pairs


def _train_pairs(params_init, ref, pairs, cfg, value_fn):
    def objective(p):
        return -math.fsum(dpo_loss(p, ref, pair, cfg.dpo_beta) for pair in pairs) / len(pairs)

    return _run(
        params_init,
        pairs,
        lambda p, pair: dpo_gradient(p, ref, pair, cfg.dpo_beta),
        cfg,
        objective,
        value_fn,
    )


def train_dpo(params_init: PolicyParams, params_ref: PolicyParams, dataset: Dataset, cfg: TrainConfig, value_fn=None) -> TrainResult:
    return _train_pairs(params_init, params_ref, build_dpo_pairs(dataset), cfg, value_fn)


# --- step-level DPO ----------------------------------------------------------


@dataclass(frozen=True)
class StepOutcome:
    example: int
    step: int
    alternative: Optional[int]  # None when no distinct action was drawn
    alternative_reward: Optional[float]
    pair: Optional[PreferencePair]


def build_step_pairs(
    params0: PolicyParams,
    env,
    reward_spec,
    dataset: Dataset,
    seed: int,
    max_redraws: int = 5,
) -> list[StepOutcome]:
    """Counterfactual step-level comparisons for every logged step.

    At step ``t`` of logged example ``k`` an alternative action is drawn from
    the behavior policy at the logged temperature (redrawn up to
    ``max_redraws`` times while it equals the logged action), the rest of the
    conversation is rolled out under the behavior policy, and the action
    whose completion earns more reward wins. Ties produce no pair. The
    random stream of ``(k, t)`` is derived from ``seed``.
    """
    outcomes = []
    for k, ex in enumerate(dataset):
        states = history_states(ex.task, ex.trajectory)
        for t, (state, logged) in enumerate(zip(states, ex.trajectory.steps)):
            rng = derive_rng(seed, "step-dpo", k, t)
            alt, lp = sample_action(params0, state, ex.temperature, rng)
            redraws = 0
            while alt == logged.action and redraws < max_redraws:
                alt, lp = sample_action(params0, state, ex.temperature, rng)
                redraws += 1
            if alt == logged.action:
                outcomes.append(StepOutcome(k, t, None, None, None))
                continue
            y, lp_y = env.user_response(ex.task, state, alt, rng)
            prefix = ex.trajectory.steps[:t] + (Step(alt, lp, y, float(lp_y)),)
            counterfactual = rollout(params0, env, reward_spec, ex.task, ex.temperature, rng, prefix=prefix)
            r_alt = counterfactual.reward_raw
            pair = None
            if r_alt > ex.reward_raw:
                pair = PreferencePair(ex.task, counterfactual.trajectory, ex.trajectory, r_alt, ex.reward_raw, step=t)
            elif r_alt < ex.reward_raw:
                pair = PreferencePair(ex.task, ex.trajectory, counterfactual.trajectory, ex.reward_raw, r_alt, step=t)
            outcomes.append(StepOutcome(k, t, alt, r_alt, pair))
    return outcomes


def train_step_dpo(
    params_init: PolicyParams,
    params_ref: PolicyParams,
    params0: PolicyParams,
    env,
    reward_spec,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int = 0,
    value_fn=None,
) -> TrainResult:
    outcomes = build_step_pairs(params0, env, reward_spec, dataset, seed)
    pairs = [o.pair for o in outcomes if o.pair is not None]
    if not pairs:
        return TrainResult(
            params_init,
            [0.0] * cfg.epochs,
            [value_fn(params_init)] * cfg.epochs if value_fn is not None else None,
            updates=0,
            skipped=len(outcomes),
        )
    result = _train_pairs(params_init, params_ref, pairs, cfg, value_fn)
    result.skipped += len(outcomes) - len(pairs)
    return result

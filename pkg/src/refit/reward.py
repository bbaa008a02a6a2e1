"""Trajectory rewards, rescaling, discounting and per-group standardization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import ValidationError
from .policy import HistoryState

MODES = ("exact_match", "judge_stub")


@dataclass(frozen=True)
class RewardSpec:
    mode: str = "exact_match"
    gamma: float = 1.0
    # judge_stub component weights: accuracy, style, brevity
    weights: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"reward mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValidationError(f"gamma must lie in (0, 1], got {self.gamma}")
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != 3 or any(x < 0 for x in w) or abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValidationError(f"judge weights must be 3 non-negative numbers summing to 1, got {w}")


@dataclass(frozen=True)
class StandardizationStats:
    mu_hat: float
    sigma_hat: float
    m: int


def judge_components(env, task, trajectory) -> tuple[float, float, float]:
    """Deterministic (accuracy, style, brevity) scores, each in [0, 1]."""
    accuracy = 1.0 if env.final_answer(trajectory) == task.hidden_intent else 0.0
    style = sum(env.action_style(s.action) for s in trajectory.steps) / len(trajectory)
    brevity = (task.horizon - len(trajectory) + 1) / task.horizon
    return accuracy, style, brevity


def raw_reward(spec: RewardSpec, env, task, trajectory) -> float:
    """Judge-scale score in [0, 10] of a finished conversation."""
    end = HistoryState(task.context_id, trajectory.pairs)
    if not env.is_terminal(task, end):
        raise ValidationError(f"task {task.task_id}: trajectory is not terminal")
    if spec.mode == "exact_match":
        return 10.0 if env.final_answer(trajectory) == task.hidden_intent else 0.0
    comps = judge_components(env, task, trajectory)
    return 10.0 * math.fsum(w * c for w, c in zip(spec.weights, comps))


def rescale(r10: float) -> float:
    if not 0.0 <= r10 <= 10.0:
        raise ValidationError(f"judge score {r10} outside [0, 10]")
    return r10 / 10.0


def apply_discount(r: float, steps_used: int, gamma: float) -> float:
    if steps_used < 1:
        raise ValidationError("steps_used must be >= 1")
    if gamma == 1.0:
        return r
    return r * gamma**steps_used


def trajectory_reward(spec: RewardSpec, env, task, trajectory) -> float:
    """Training reward in [0, 1]: rescaled, and discounted on adaptive envs."""
    r = rescale(raw_reward(spec, env, task, trajectory))
    if env.adaptive:
        r = apply_discount(r, len(trajectory), spec.gamma)
    return r


def standardize_group(rewards: Sequence[float]) -> tuple[StandardizationStats, list[float]]:
    """Mean, Bessel-corrected std and standardized rewards of one group.

    A group whose rewards are all equal has ``sigma_hat == 0`` and maps to
    all-zero standardized rewards.
    """
    m = len(rewards)
    if m == 0:
        raise ValidationError("cannot standardize an empty group")
    if m == 1:
        raise ValidationError("cannot standardize a group of size 1; use raw rewards")
    mu = math.fsum(rewards) / m
    if min(rewards) == max(rewards):
        # checked directly: the rounded mean can miss a constant group by an ulp
        return StandardizationStats(float(rewards[0]), 0.0, m), [0.0] * m
    sigma = math.sqrt(math.fsum((r - mu) ** 2 for r in rewards) / (m - 1))
    if sigma == 0.0:  # squared deviations underflowed
        return StandardizationStats(mu, 0.0, m), [0.0] * m
    return StandardizationStats(mu, sigma, m), [(r - mu) / sigma for r in rewards]

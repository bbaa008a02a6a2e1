"""Rollouts under the behavior policy and assembly of logged datasets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, LoggedExample, Step, Trajectory, ValidationError, derive_seed, group_by_task
from .policy import HistoryState, PolicyParams, action_logits, categorical, log_softmax
from .reward import RewardSpec, standardize_group, trajectory_reward

DEFAULT_TEMPERATURES = (0.7, 1.0, 1.3)


@dataclass(frozen=True)
class DatagenConfig:
    m: int = 3
    temperatures: tuple = DEFAULT_TEMPERATURES
    master_seed: int = 0
    record_tempered_propensity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if self.m < 1:
            raise ValidationError(f"m must be >= 1, got {self.m}")
        if not self.temperatures:
            raise ValidationError("temperatures must be non-empty")
        if any(not t > 0 for t in self.temperatures):
            raise ValidationError(f"temperatures must be > 0, got {self.temperatures}")


def rollout(
    params: PolicyParams,
    env,
    reward_spec: RewardSpec,
    task,
    temperature: float,
    rng: np.random.Generator,
    record_tempered_propensity: bool = True,
    seed: int = 0,
    prefix: tuple = (),
) -> LoggedExample:
    """Run one conversation of ``task`` under ``params`` at ``temperature``.

    ``prefix`` (list of ``Step``) forces the first steps; used by the
    step-level counterfactual rollouts.
    """
    if params.n_actions != env.action_count:
        raise ValidationError(f"policy has {params.n_actions} actions, env has {env.action_count}")
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    state = HistoryState(task.context_id)
    steps = []
    for s in prefix:
        steps.append(s)
        state = state.extend(s.action, s.observation)
    while not env.is_terminal(task, state):
        logits = action_logits(params, state)
        logp = log_softmax(logits)
        tempered = logp if temperature == 1.0 else log_softmax(logits / temperature)
        a = categorical(tempered, rng)
        lp_a = float(tempered[a]) if record_tempered_propensity else float(logp[a])
        y, lp_y = env.user_response(task, state, a, rng)
        steps.append(Step(a, lp_a, y, float(lp_y)))
        state = state.extend(a, y)
    traj = Trajectory(tuple(steps), terminated_early=len(steps) < task.horizon)
    return LoggedExample(
        task=task,
        trajectory=traj,
        reward_raw=trajectory_reward(reward_spec, env, task, traj),
        group_id=task.task_id,
        temperature=float(temperature),
        seed=int(seed),
    )


def rollout_seed(master_seed: int, task_id: str, i: int) -> int:
    return derive_seed(master_seed, "rollout", task_id, i)


def generate_dataset(params: PolicyParams, env, reward_spec: RewardSpec, tasks, cfg: DatagenConfig) -> Dataset:
    """``len(tasks) * m`` logged rollouts, grouped by task.

    Rollout ``i`` of a task runs at ``temperatures[i % len(temperatures)]``
    with its own generator seeded from ``(master_seed, task_id, i)``.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValidationError("generate_dataset needs at least one task")
    if len({t.task_id for t in tasks}) != len(tasks):
        raise ValidationError("task ids must be unique")
    examples = []
    for task in tasks:
        env.check_task(task)
        for i in range(cfg.m):
            seed = rollout_seed(cfg.master_seed, task.task_id, i)
            temp = cfg.temperatures[i % len(cfg.temperatures)]
            examples.append(
                rollout(
                    params,
                    env,
                    reward_spec,
                    task,
                    temp,
                    np.random.default_rng(seed),
                    record_tempered_propensity=cfg.record_tempered_propensity,
                    seed=seed,
                )
            )
    return Dataset(tuple(examples))


def attach_standardized(dataset: Dataset) -> Dataset:
    """Fill ``reward_std`` group by group; ``reward_raw`` is left alone."""
    std: dict[int, float] = {}
    for gid, idx in dataset.group_index.items():
        if len(idx) < 2:
            raise ValidationError(f"group {gid!r} has {len(idx)} rollout(s); standardization needs m >= 2")
        _, r_tilde = standardize_group([dataset.examples[i].reward_raw for i in idx])
        std.update(zip(idx, r_tilde))
    return dataset.replace_examples(
        ex.replace(reward_std=std[i]) for i, ex in enumerate(dataset.examples)
    )


def shift_rewards(dataset: Dataset, offset: float, scale: float = 1.0) -> Dataset:
    """Affinely transformed raw rewards, standardized values dropped.

    The result is an ``unscaled`` diagnostic dataset.
    """
    return Dataset(
        tuple(ex.replace(reward_raw=scale * ex.reward_raw + offset, reward_std=None) for ex in dataset),
        unscaled=True,
    )


__all__ = [
    "DatagenConfig",
    "rollout",
    "generate_dataset",
    "attach_standardized",
    "shift_rewards",
    "group_by_task",
]

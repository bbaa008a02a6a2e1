"""Value functionals, offline objectives, bound constants and gradients.

Exact quantities enumerate every trajectory of every task, so they only work
on desk-scale environments (see ``ConversationEnv.enumerate_trajectories``).
Contexts are weighted uniformly over the supplied task list.

Standardized variants take ``stats``, a mapping ``task_id -> (mu, sigma)``;
``standardized_reward`` turns a raw reward into ``(r - mu) / sigma`` and maps
``sigma == 0`` to 0.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import Dataset, LoggedExample, TaskInstance, Trajectory, ValidationError
from .policy import (
    HistoryState,
    PolicyParams,
    action_logprobs,
    history_states,
    trajectory_action_grad,
)
from .reward import RewardSpec, trajectory_reward

LEMMA_TOL = 1e-9

Stats = Mapping[str, tuple[float, float]]


# --- enumeration cache --------------------------------------------------------


@dataclass(frozen=True)
class TaskTree:
    """All trajectories of one task key with their θ-independent parts."""

    task: TaskInstance
    trajectories: tuple[Trajectory, ...]
    states: tuple[tuple[HistoryState, ...], ...]
    actions: tuple[tuple[int, ...], ...]
    obs_logprob: np.ndarray
    reward: np.ndarray

    @property
    def obs_prob(self) -> np.ndarray:
        return np.exp(self.obs_logprob)


@lru_cache(maxsize=256)
def _task_tree(env, reward_spec: RewardSpec, key: tuple) -> TaskTree:
    task = TaskInstance("_", *key)
    enum = env.enumerate_trajectories(task)
    trajs = tuple(e.trajectory for e in enum)
    return TaskTree(
        task=task,
        trajectories=trajs,
        states=tuple(tuple(history_states(task, t)) for t in trajs),
        actions=tuple(t.actions for t in trajs),
        obs_logprob=np.array([t.observation_logprob() for t in trajs]),
        reward=np.array([trajectory_reward(reward_spec, env, task, t) for t in trajs]),
    )


def task_tree(env, reward_spec: RewardSpec, task: TaskInstance) -> TaskTree:
    env.check_task(task)
    return _task_tree(env, reward_spec, task.key)


class LogprobMemo:
    """Per-state action log-probabilities of one policy, computed once."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self._memo: dict = {}
        self._trees: dict = {}

    def state(self, s: HistoryState) -> np.ndarray:
        lp = self._memo.get(s.key)
        if lp is None:
            lp = action_logprobs(self.params, s)
            self._memo[s.key] = lp
        return lp

    def actions(self, states, actions) -> float:
        return math.fsum(self.state(s)[a] for s, a in zip(states, actions))

    def tree(self, tree: TaskTree) -> np.ndarray:
        """Sum of action log-probs for every trajectory of ``tree``."""
        out = self._trees.get(tree.task.key)
        if out is None:
            out = np.array([self.actions(st, ac) for st, ac in zip(tree.states, tree.actions)])
            self._trees[tree.task.key] = out
        return out


def _memo(p) -> LogprobMemo:
    return p if isinstance(p, LogprobMemo) else LogprobMemo(p)


def standardized_reward(r, mu: float, sigma: float):
    if sigma == 0.0:
        return np.zeros_like(np.asarray(r, dtype=float))
    return (np.asarray(r, dtype=float) - mu) / sigma


def _weighted_tasks(tasks: Sequence[TaskInstance]):
    """Tasks paired with their weight under the uniform context distribution."""
    tasks = list(tasks)
    if not tasks:
        raise ValidationError("need at least one task")
    n = len(tasks)
    return [(t, 1.0 / n) for t in tasks]


def _rewards(tree: TaskTree, task: TaskInstance, stats: Optional[Stats]) -> np.ndarray:
    if stats is None:
        return tree.reward
    mu, sigma = stats[task.task_id]
    return standardized_reward(tree.reward, mu, sigma)


def _expect(env, reward_spec, tasks, stats, fn) -> float:
    """sum over tasks of w(task) * fn(tree, rewards)."""
    terms = []
    for task, w in _weighted_tasks(tasks):
        tree = task_tree(env, reward_spec, task)
        terms.append(w * fn(tree, _rewards(tree, task, stats)))
    return math.fsum(terms)


def exact_moments(params0: PolicyParams, env, reward_spec: RewardSpec, tasks) -> dict:
    """Per-task mean and standard deviation of the reward under ``params0``."""
    memo = _memo(params0)
    out = {}
    for task in tasks:
        tree = task_tree(env, reward_spec, task)
        p = tree.obs_prob * np.exp(memo.tree(tree))
        mu = float(np.dot(p, tree.reward))
        var = float(np.dot(p, (tree.reward - mu) ** 2))
        out[task.task_id] = (mu, math.sqrt(max(var, 0.0)))
    return out


def _resolve_stats(standardized, stats, params0, env, reward_spec, tasks):
    if stats is not None:
        return stats
    if standardized:
        return exact_moments(params0, env, reward_spec, tasks)
    return None


# --- online value -------------------------------------------------------------


def exact_value(params, env, reward_spec: RewardSpec, tasks, stats: Optional[Stats] = None) -> float:
    """V(θ) = E_x E_{τ ~ π(.|x;θ)} r(x, τ), by enumeration."""
    memo = _memo(params)
    return _expect(
        env,
        reward_spec,
        tasks,
        stats,
        lambda tree, r: float(np.dot(tree.obs_prob * np.exp(memo.tree(tree)), r)),
    )


def mc_value(params: PolicyParams, env, reward_spec: RewardSpec, tasks, samples: int, rng) -> tuple[float, float]:
    """Monte Carlo estimate of V(θ) and its standard error."""
    from .datagen import rollout

    if samples < 1:
        raise ValidationError("samples must be >= 1")
    tasks = list(tasks)
    idx = rng.integers(0, len(tasks), size=samples)
    r = np.array([rollout(params, env, reward_spec, tasks[i], 1.0, rng).reward_raw for i in idx])
    return _mean_se(r)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return float(x[0]), 0.0
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


# --- inverse propensity scoring -------------------------------------------


def ips_ratios(dataset: Dataset, params, clip: Optional[float] = None) -> np.ndarray:
    """π(τ|x;θ) / π_0(τ|x) per example; observation terms cancel."""
    memo = _memo(params)
    out = np.empty(len(dataset))
    for i, ex in enumerate(dataset):
        states = history_states(ex.task, ex.trajectory)
        log_target = memo.actions(states, ex.trajectory.actions)
        out[i] = math.exp(log_target - ex.trajectory.behavior_logprob())
    if clip is not None:
        out = np.minimum(out, clip)
    return out


def ips_value(dataset: Dataset, params, env=None, clip: Optional[float] = None) -> tuple[float, float]:
    """Propensity-weighted estimate of V(θ) from logged data, with its SE.

    ``clip`` caps the ratios; off by default and meant for diagnostics only.
    """
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    if env is not None:
        for ex in dataset:
            env.check_trajectory(ex.task, ex.trajectory)
    r = np.array([ex.reward_raw for ex in dataset])
    return _mean_se(r * ips_ratios(dataset, params, clip))


def exact_ips_value(params, params0, env, reward_spec, tasks) -> float:
    """E_{π_0}[(π/π_0) r], computed by enumeration."""
    m, m0 = _memo(params), _memo(params0)

    def term(tree, r):
        lp, lp0 = m.tree(tree), m0.tree(tree)
        behavior = tree.obs_prob * np.exp(lp0)
        return float(np.dot(behavior * np.exp(lp - lp0), r))

    return _expect(env, reward_spec, tasks, None, term)


# --- offline objectives -------------------------------------------------------


def offline_objective(params, dataset: Dataset, use_standardized: bool = False) -> float:
    """(1/|D|) sum of weight * sum_t log π(a_t | x, τ_{t-1}; θ)."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    memo = _memo(params)
    terms = []
    for ex in dataset:
        w = ex.weight(use_standardized)
        if w == 0.0:
            continue
        terms.append(w * memo.actions(history_states(ex.task, ex.trajectory), ex.trajectory.actions))
    return math.fsum(terms) / len(dataset)


def expected_offline_actions(params, params0, env, reward_spec, tasks, standardized=False, stats=None) -> float:
    """Exact E_{π_0}[r * sum_t log π(a_t|...;θ)] (the θ-dependent part)."""
    m, m0 = _memo(params), _memo(params0)
    stats = _resolve_stats(standardized, stats, m0.params, env, reward_spec, tasks)
    return _expect(
        env,
        reward_spec,
        tasks,
        stats,
        lambda tree, r: float(np.dot(tree.obs_prob * np.exp(m0.tree(tree)), r * m.tree(tree))),
    )


def exact_offline_full(params, params0, env, reward_spec, tasks, standardized=False, stats=None) -> float:
    """Exact E_{π_0}[r * log π(τ|x;θ)], observation terms included."""
    m, m0 = _memo(params), _memo(params0)
    stats = _resolve_stats(standardized, stats, m0.params, env, reward_spec, tasks)
    return _expect(
        env,
        reward_spec,
        tasks,
        stats,
        lambda tree, r: float(
            np.dot(tree.obs_prob * np.exp(m0.tree(tree)), r * (m.tree(tree) + tree.obs_logprob))
        ),
    )


def observation_constant(params0, env, reward_spec, tasks, standardized=False, stats=None) -> float:
    """E_{π_0}[r * sum_t log p(y_t | ...)]: the θ-free gap between the full
    and actions-only offline objectives."""
    m0 = _memo(params0)
    stats = _resolve_stats(standardized, stats, m0.params, env, reward_spec, tasks)
    return _expect(
        env,
        reward_spec,
        tasks,
        stats,
        lambda tree, r: float(np.dot(tree.obs_prob * np.exp(m0.tree(tree)), r * tree.obs_logprob)),
    )


def constant_c1(params0, env, reward_spec, tasks, standardized=False, stats=None) -> float:
    """E_{π_0}[r * (1 - log π_0(τ|x))]."""
    m0 = _memo(params0)
    stats = _resolve_stats(standardized, stats, m0.params, env, reward_spec, tasks)

    def term(tree, r):
        lp0 = m0.tree(tree) + tree.obs_logprob
        return float(np.dot(np.exp(lp0), r * (1.0 - lp0)))

    return _expect(env, reward_spec, tasks, stats, term)


def log_ratio_table(params, params0, env, reward_spec, tasks) -> list[np.ndarray]:
    m, m0 = _memo(params), _memo(params0)
    out = []
    for task, _ in _weighted_tasks(tasks):
        tree = task_tree(env, reward_spec, task)
        lp0 = m0.tree(tree)
        if not np.all(np.isfinite(lp0)):
            raise ValidationError(f"behavior policy has zero probability on a trajectory of {task.task_id}")
        out.append(m.tree(tree) - lp0)
    return out


def pointwise_c2(params, params0, env, tasks, b: float, reward_spec: Optional[RewardSpec] = None) -> float:
    """b * max over (x, τ) of (u - 1 - log u), u = π(τ|x;θ)/π_0(τ|x)."""
    if b < 0:
        raise ValidationError("b must be non-negative")
    reward_spec = reward_spec or RewardSpec()
    worst = 0.0
    for log_u in log_ratio_table(params, params0, env, reward_spec, tasks):
        worst = max(worst, float(np.max(np.expm1(log_u) - log_u)))
    return b * worst


def reward_bound(env, reward_spec, tasks, stats: Optional[Stats] = None) -> float:
    """max |r| over every enumerated (x, τ)."""
    best = 0.0
    for task, _ in _weighted_tasks(tasks):
        tree = task_tree(env, reward_spec, task)
        best = max(best, float(np.max(np.abs(_rewards(tree, task, stats)))))
    return best


# --- bound reports ------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    lemma: str
    v_online: float
    j_offline_full: float
    c1: float
    c2: float
    b: float
    lhs: float
    rhs: float
    gap: float
    satisfied: bool

    def to_dict(self) -> dict:
        return asdict(self)


def verify_lemma1(params, params0, env, reward_spec, tasks) -> BoundReport:
    """V(θ) >= E_{π_0}[r log π(τ;θ)] + C1 for non-negative rewards."""
    m, m0 = _memo(params), _memo(params0)
    v = exact_value(m, env, reward_spec, tasks)
    j = exact_offline_full(m, m0, env, reward_spec, tasks)
    c1 = constant_c1(m0, env, reward_spec, tasks)
    b = reward_bound(env, reward_spec, tasks)
    c2 = pointwise_c2(m, m0, env, tasks, b, reward_spec)
    gap = v - j - c1
    return BoundReport("lemma1", v, j, c1, c2, b, v, j + c1, gap, gap >= -LEMMA_TOL)


def verify_lemma3(params, params0, env, reward_spec, tasks, stats: Optional[Stats] = None, b: Optional[float] = None) -> BoundReport:
    """|E_π[r~] - E_{π_0}[r~ log π(τ;θ)]| <= |C1| + C2(θ) with standardized r~.

    ``stats`` defaults to the exact per-task moments under ``params0``;
    ``b`` defaults to max |r~|.
    """
    m, m0 = _memo(params), _memo(params0)
    stats = _resolve_stats(True, stats, m0.params, env, reward_spec, tasks)
    if b is None:
        b = reward_bound(env, reward_spec, tasks, stats)
    v = exact_value(m, env, reward_spec, tasks, stats)
    j = exact_offline_full(m, m0, env, reward_spec, tasks, stats=stats)
    c1 = constant_c1(m0, env, reward_spec, tasks, stats=stats)
    c2 = pointwise_c2(m, m0, env, tasks, b, reward_spec)
    lhs = abs(v - j)
    rhs = abs(c1) + c2
    gap = rhs - lhs
    return BoundReport("lemma3", v, j, c1, c2, b, lhs, rhs, gap, gap >= -LEMMA_TOL)


# --- gradients ----------------------------------------------------------------


def grad_example(params: PolicyParams, example: LoggedExample, use_standardized: bool = False) -> np.ndarray:
    """g = weight * sum_t grad log π(a_t | x, τ_{t-1}; θ)."""
    w = example.weight(use_standardized)
    if w == 0.0:
        return np.zeros(params.values.size)
    return w * trajectory_action_grad(params, example.task, example.trajectory)


def example_gradients(params: PolicyParams, dataset: Dataset, use_standardized: bool = False) -> np.ndarray:
    return np.stack([grad_example(params, ex, use_standardized) for ex in dataset])


def offline_gradient(params: PolicyParams, dataset: Dataset, use_standardized: bool = False) -> np.ndarray:
    """Gradient of ``offline_objective``: the mean of per-example gradients."""
    total = np.zeros(params.values.size)
    for ex in dataset:
        total += grad_example(params, ex, use_standardized)
    return total / len(dataset)


def gradient_variance(params: PolicyParams, dataset: Dataset, use_standardized: bool = False) -> float:
    """Trace of the sample covariance of the per-example gradients."""
    if len(dataset) < 2:
        raise ValidationError("gradient_variance needs at least 2 examples")
    g = example_gradients(params, dataset, use_standardized)
    return float(np.sum(np.var(g, axis=0, ddof=1)))


def exact_value_gradient(params: PolicyParams, env, reward_spec, tasks) -> np.ndarray:
    """Score-identity gradient E_π[r * grad log π(τ;θ)], by enumeration."""
    memo = _memo(params)
    total = np.zeros(params.values.size)
    for task, w in _weighted_tasks(tasks):
        tree = task_tree(env, reward_spec, task)
        p = tree.obs_prob * np.exp(memo.tree(tree))
        for traj, pi, r in zip(tree.trajectories, p, tree.reward):
            if pi * r != 0.0:
                trajectory_action_grad(params, task, traj, w * pi * r, total)
    return total


# --- argmax structure for standardized rewards ---------------------------------


def greedy_maximizer(env, reward_spec, tasks, stats: Optional[Stats] = None) -> tuple[dict, float]:
    """Deterministic tabular policy maximizing sum_x w(x) E[r|x] (or of r~).

    Backward induction over history states: a state is shared by all tasks
    that can reach it, so each task's reach probability factors into a
    policy part common to all tasks and an observation part kept per task.
    Ties go to the lowest action id. Returns ``(state_key -> action, value)``.
    """
    weighted = _weighted_tasks(tasks)
    by_context: dict[int, list] = {}
    for task, w in weighted:
        by_context.setdefault(task.context_id, []).append((task, w))
    policy: dict = {}
    total = []
    for ctx in sorted(by_context):
        group = by_context[ctx]
        weights = np.array([w for _, w in group])

        def solve(state: HistoryState, belief: np.ndarray, steps: tuple) -> float:
            best_a, best_v = None, -math.inf
            for a in range(env.action_count):
                outcomes: dict[int, np.ndarray] = {}
                for k, (task, _) in enumerate(group):
                    if belief[k] == 0.0:
                        continue
                    for y, lp in env.observation_distribution(task, state, a):
                        outcomes.setdefault(y, np.zeros(len(group)))[k] = belief[k] * math.exp(lp)
                v_a = []
                for y in sorted(outcomes):
                    b2 = outcomes[y]
                    nxt = state.extend(a, y)
                    path = steps + ((a, y),)
                    terminal = [env.is_terminal(task, nxt) for task, _ in group]
                    if all(terminal[k] for k in range(len(group)) if b2[k] > 0):
                        for k, (task, _) in enumerate(group):
                            if b2[k] > 0:
                                v_a.append(b2[k] * _terminal_reward(env, reward_spec, task, path, stats))
                    else:
                        v_a.append(solve(nxt, b2, path))
                v = math.fsum(v_a)
                if v > best_v + 1e-12:
                    best_a, best_v = a, v
            policy[state.key] = best_a
            return best_v

        total.append(solve(HistoryState(ctx), weights, ()))
    return policy, math.fsum(total)


def _terminal_reward(env, reward_spec, task, pairs, stats) -> float:
    from .core import Step

    traj = Trajectory(
        tuple(Step(a, 0.0, y, 0.0) for a, y in pairs), terminated_early=len(pairs) < task.horizon
    )
    r = trajectory_reward(reward_spec, env, task, traj)
    if stats is None:
        return r
    mu, sigma = stats[task.task_id]
    return float(standardized_reward(r, mu, sigma))


def deterministic_tabular(env, tasks, actions: Mapping, sharpness: float = 60.0) -> PolicyParams:
    """Tabular policy putting logit ``sharpness`` on the chosen action of each state."""
    keys = env.reachable_states(tasks)
    A = env.action_count
    values = np.zeros(len(keys) * A)
    for i, k in enumerate(keys):
        a = actions.get(k)
        if a is not None:
            values[i * A + a] = sharpness
    return PolicyParams.tabular(keys, A, values)


def standardization_constant(tasks, stats: Stats) -> float:
    """E_x[mu(x) / sigma(x)] under uniform q."""
    return math.fsum(w * stats[t.task_id][0] / stats[t.task_id][1] for t, w in _weighted_tasks(tasks))


def inverse_sigma_value(params, env, reward_spec, tasks, stats: Stats) -> float:
    """E_x[E[r|x] / sigma(x)]."""
    memo = _memo(params)
    terms = []
    for task, w in _weighted_tasks(tasks):
        tree = task_tree(env, reward_spec, task)
        v = float(np.dot(tree.obs_prob * np.exp(memo.tree(tree)), tree.reward))
        terms.append(w * v / stats[task.task_id][1])
    return math.fsum(terms)

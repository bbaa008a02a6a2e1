"""Softmax conversation policies over categorical actions.

Two parameter families share one interface:

* ``tabular``: one logit row per exact ``(context, prefix)`` key. Keys outside
  the table get zero logits (uniform), so a tabular behavior policy has full
  support everywhere.
* ``linear``: logits ``W @ phi(state)`` with ``phi`` the concatenation of a
  context one-hot and bag-of-(action, observation) counts.

Parameters are stored flat; ``values.reshape(rows, cols)`` is ``(S, A)`` for
tabular and ``(A, F)`` for linear.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import SchemaError, ValidationError, dumps

StateKey = tuple  # (context_id, ((action, observation), ...))


@dataclass(frozen=True)
class HistoryState:
    context_id: int
    prefix: tuple[tuple[int, int], ...] = ()

    @property
    def key(self) -> StateKey:
        return (self.context_id, self.prefix)

    @property
    def t(self) -> int:
        """Index of the next step, counting from 1."""
        return len(self.prefix) + 1

    def extend(self, action: int, observation: int) -> "HistoryState":
        return HistoryState(self.context_id, self.prefix + ((int(action), int(observation)),))


@dataclass(frozen=True)
class LinearFeatures:
    """phi(state) = [onehot(context) | counts of (action, observation) pairs]."""

    n_contexts: int
    n_actions: int
    n_observations: int

    @property
    def dim(self) -> int:
        return self.n_contexts + self.n_actions * self.n_observations

    def __call__(self, state: HistoryState) -> np.ndarray:
        return _features(self, state.key)


@lru_cache(maxsize=200_000)
def _features(fm: LinearFeatures, key: StateKey) -> np.ndarray:
    context_id, prefix = key
    if not 0 <= context_id < fm.n_contexts:
        raise ValidationError(f"context {context_id} outside [0, {fm.n_contexts})")
    phi = np.zeros(fm.dim)
    phi[context_id] = 1.0
    for a, y in prefix:
        phi[fm.n_contexts + a * fm.n_observations + y] += 1.0
    phi.setflags(write=False)
    return phi


@dataclass(frozen=True, eq=False)
class PolicyParams:
    family: str
    n_actions: int
    values: np.ndarray
    features: Optional[LinearFeatures] = None
    state_keys: Optional[tuple] = None
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", values)
        if self.family == "linear":
            if self.features is None:
                raise ValidationError("linear policy needs a feature map")
            expected = self.features.dim * self.n_actions
        elif self.family == "tabular":
            if self.state_keys is None:
                raise ValidationError("tabular policy needs a state-key table")
            object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.state_keys)})
            expected = len(self.state_keys) * self.n_actions
        else:
            raise ValidationError(f"unknown policy family {self.family!r}")
        if values.size != expected:
            raise ValidationError(
                f"{self.family} policy expects {expected} parameters, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("policy parameters must be finite")

    @classmethod
    def linear(cls, features: LinearFeatures, n_actions: int, values=None) -> "PolicyParams":
        if values is None:
            values = np.zeros(features.dim * n_actions)
        return cls("linear", n_actions, values, features=features)

    @classmethod
    def tabular(cls, state_keys: Sequence[StateKey], n_actions: int, values=None) -> "PolicyParams":
        keys = tuple(state_keys)
        if values is None:
            values = np.zeros(len(keys) * n_actions)
        return cls("tabular", n_actions, values, state_keys=keys)

    @property
    def shape(self) -> tuple[int, int]:
        if self.family == "linear":
            return (self.n_actions, self.features.dim)
        return (len(self.state_keys), self.n_actions)

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def with_values(self, values) -> "PolicyParams":
        return PolicyParams(
            self.family, self.n_actions, values, features=self.features, state_keys=self.state_keys
        )

    def row(self, state: HistoryState) -> Optional[int]:
        """Row of ``state`` in the tabular table, or None when unseen."""
        return self._index.get(state.key)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.family == other.family
            and self.n_actions == other.n_actions
            and self.features == other.features
            and self.state_keys == other.state_keys
            and np.array_equal(self.values, other.values)
        )


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z)
    shifted = z - m
    return shifted - math.log(np.sum(np.exp(shifted)))


def action_logits(params: PolicyParams, state: HistoryState) -> np.ndarray:
    if params.family == "linear":
        return params.matrix @ params.features(state)
    row = params.row(state)
    if row is None:
        return np.zeros(params.n_actions)
    return params.matrix[row].copy()


def action_logprobs(params: PolicyParams, state: HistoryState) -> np.ndarray:
    return log_softmax(action_logits(params, state))


def _check_action(params: PolicyParams, a: int):
    if not 0 <= a < params.n_actions:
        raise ValidationError(f"action {a} outside [0, {params.n_actions})")


def action_logprob(params: PolicyParams, state: HistoryState, a: int) -> float:
    _check_action(params, a)
    return float(action_logprobs(params, state)[a])


def sample_action(
    params: PolicyParams, state: HistoryState, temperature: float, rng: np.random.Generator
) -> tuple[int, float]:
    """Draw from softmax(logits / temperature); return the action and its
    log-probability under that tempered distribution."""
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    logits = action_logits(params, state)
    logp = log_softmax(logits / temperature)
    a = categorical(logp, rng)
    return a, float(logp[a])


def categorical(logp: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(a, len(logp) - 1)


def grad_action_logprob(params: PolicyParams, state: HistoryState, a: int) -> np.ndarray:
    """Score d/dtheta log pi(a | state; theta), flattened like ``values``."""
    _check_action(params, a)
    grad = np.zeros(params.values.size)
    add_grad_action_logprob(params, state, a, 1.0, grad)
    return grad


def add_grad_action_logprob(
    params: PolicyParams, state: HistoryState, a: int, scale: float, out: np.ndarray
) -> None:
    """``out += scale * grad log pi(a | state)`` without allocating a full vector."""
    if params.family == "linear":
        phi = params.features(state)
        W = params.matrix
        p = np.exp(log_softmax(W @ phi))
        coef = -p
        coef[a] += 1.0
        out.reshape(W.shape)[...] += scale * np.outer(coef, phi)
        return
    row = params.row(state)
    if row is None:
        return
    z = params.matrix[row]
    p = np.exp(log_softmax(z))
    coef = -p
    coef[a] += 1.0
    A = params.n_actions
    out[row * A : (row + 1) * A] += scale * coef


def history_states(task, trajectory):
    """States ``(x, tau_{t-1})`` visited before each step of ``trajectory``."""
    state = HistoryState(task.context_id)
    states = []
    for s in trajectory.steps:
        states.append(state)
        state = state.extend(s.action, s.observation)
    return states


def trajectory_logprob(params: PolicyParams, env, task, trajectory, include_observations: bool = True) -> float:
    """log pi(tau | x; theta). With ``include_observations`` off only the
    action terms are summed; those are the only ones that depend on theta."""
    env.check_trajectory(task, trajectory)
    terms = []
    for state, s in zip(history_states(task, trajectory), trajectory.steps):
        terms.append(action_logprob(params, state, s.action))
        if include_observations:
            terms.append(s.observation_logprob)
    return math.fsum(terms)


def trajectory_action_grad(params: PolicyParams, task, trajectory, scale: float = 1.0, out=None) -> np.ndarray:
    """``scale * sum_t grad log pi(a_t | x, tau_{t-1})``."""
    if out is None:
        out = np.zeros(params.values.size)
    for state, s in zip(history_states(task, trajectory), trajectory.steps):
        add_grad_action_logprob(params, state, s.action, scale, out)
    return out


# --- checkpoints ------------------------------------------------------------


def policy_to_dict(params: PolicyParams) -> dict:
    header = {"family": params.family, "n_actions": params.n_actions}
    if params.family == "linear":
        fm = params.features
        header["features"] = {
            "n_contexts": fm.n_contexts,
            "n_actions": fm.n_actions,
            "n_observations": fm.n_observations,
        }
    else:
        header["state_keys"] = [[c, [list(p) for p in prefix]] for c, prefix in params.state_keys]
    header["values"] = [float(v) for v in params.values]
    return header


def policy_from_dict(d: dict) -> PolicyParams:
    try:
        family = d["family"]
        n_actions = int(d["n_actions"])
        values = np.array(d["values"], dtype=float)
        if family == "linear":
            fm = LinearFeatures(**{k: int(v) for k, v in d["features"].items()})
            return PolicyParams.linear(fm, n_actions, values)
        keys = tuple((int(c), tuple((int(a), int(y)) for a, y in prefix)) for c, prefix in d["state_keys"])
        return PolicyParams.tabular(keys, n_actions, values)
    except (KeyError, TypeError) as err:
        raise SchemaError(f"malformed policy checkpoint: {err}") from None


def save_policy(params: PolicyParams, path) -> None:
    Path(path).write_text(dumps(policy_to_dict(params)) + "\n", encoding="utf-8")


def load_policy(path) -> PolicyParams:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}: malformed checkpoint ({err.msg})") from None
    return policy_from_dict(d)

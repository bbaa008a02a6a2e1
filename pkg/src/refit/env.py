"""Simulated users and exact trajectory enumeration.

``HiddenIntentQA``: the user has one of ``n_intents`` hidden intents, each
described by ``n_attributes`` attributes with ``n_values`` values. Action ids
``0..K-1`` ask for attribute ``j``; ids ``K..K+G-1`` answer with intent ``k``.
Observations ``0..V-1`` are attribute values and ``V`` is the terminal
acknowledgment.

``ScriptedExamQA``: a three-line user script ("solve", "think deeper",
"final answer") that ignores the agent. Actions are answer choice x style.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import TaskInstance, Step, Trajectory, ValidationError
from .policy import HistoryState, PolicyParams, action_logprobs

MAX_LEAVES = 10**6


class EnumerationTooLarge(RuntimeError):
    def __init__(self, leaves: int, limit: int = MAX_LEAVES):
        super().__init__(f"enumeration would produce {leaves} leaves (limit {limit})")
        self.leaves = leaves
        self.limit = limit


@dataclass(frozen=True)
class EnumeratedTrajectory:
    trajectory: Trajectory
    obs_prob_product: float
    policy_logprob: Optional[float] = None  # sum of action log-probs, when a policy was given

    @property
    def obs_logprob(self) -> float:
        return self.trajectory.observation_logprob()

    @property
    def probability(self) -> float:
        if self.policy_logprob is None:
            raise ValueError("enumerated without a policy")
        return self.obs_prob_product * math.exp(self.policy_logprob)


class ConversationEnv:
    """Shared episode protocol; subclasses define actions and the user."""

    kind: str
    horizon: int
    adaptive: bool

    # subclass API
    action_count: int
    observation_count: int
    n_contexts: int
    n_intents: int

    def answer_of(self, action: int) -> Optional[int]:
        raise NotImplementedError

    def action_style(self, action: int) -> bool:
        raise NotImplementedError

    def observation_distribution(self, task, history: HistoryState, action: int) -> list[tuple[int, float]]:
        """Outcomes with positive probability as ``(observation, logprob)``."""
        raise NotImplementedError

    def make_tasks(self, count: int, rng: np.random.Generator, prefix: str = "task") -> list[TaskInstance]:
        raise NotImplementedError

    # shared protocol

    def check_task(self, task: TaskInstance) -> None:
        if not 0 <= task.context_id < self.n_contexts:
            raise ValidationError(f"task {task.task_id}: context {task.context_id} out of range")
        if not 0 <= task.hidden_intent < self.n_intents:
            raise ValidationError(f"task {task.task_id}: intent {task.hidden_intent} out of range")

    def check_action(self, action: int) -> None:
        if not 0 <= action < self.action_count:
            raise ValidationError(f"action {action} outside [0, {self.action_count})")

    def check_trajectory(self, task: TaskInstance, trajectory: Trajectory) -> None:
        self.check_task(task)
        if len(trajectory) > task.horizon:
            raise ValidationError("trajectory longer than the task horizon")
        for i, s in enumerate(trajectory.steps):
            self.check_action(s.action)
            if not 0 <= s.observation < self.observation_count:
                raise ValidationError(f"step {i}: observation {s.observation} out of range")
            if self.adaptive and i < len(trajectory) - 1 and self.answer_of(s.action) is not None:
                raise ValidationError(f"step {i}: answer action before the end of an adaptive episode")
        if trajectory.terminated_early:
            if not (self.adaptive and self.answer_of(trajectory.steps[-1].action) is not None):
                raise ValidationError("terminated early without a final answer action")

    def is_answer(self, action: int) -> bool:
        return self.answer_of(action) is not None

    def is_terminal(self, task: TaskInstance, history: HistoryState) -> bool:
        if len(history.prefix) >= task.horizon:
            return True
        return bool(self.adaptive and history.prefix and self.is_answer(history.prefix[-1][0]))

    def user_response(
        self, task: TaskInstance, history: HistoryState, action: int, rng: np.random.Generator
    ) -> tuple[int, float]:
        self.check_action(action)
        outcomes = self.observation_distribution(task, history, action)
        if len(outcomes) == 1:
            return outcomes[0]
        u = rng.random()
        acc = 0.0
        for y, lp in outcomes:
            acc += math.exp(lp)
            if u < acc:
                return y, lp
        return outcomes[-1]

    def final_answer(self, trajectory: Trajectory) -> Optional[int]:
        """Intent named by the last action, or None if it is not an answer."""
        return self.answer_of(trajectory.steps[-1].action)

    def branching(self, action: int) -> int:
        raise NotImplementedError

    def leaf_count(self, horizon: int) -> int:
        """Number of trajectories ``enumerate_trajectories`` would produce."""
        count = 1  # leaves below a node at depth == horizon
        for _ in range(horizon):
            total = 0
            for a in range(self.action_count):
                b = self.branching(a)
                total += b if (self.adaptive and self.is_answer(a)) else b * count
            count = total
        return count

    def enumerate_trajectories(
        self, task: TaskInstance, params: Optional[PolicyParams] = None, limit: int = MAX_LEAVES
    ) -> list[EnumeratedTrajectory]:
        """Every reachable trajectory of ``task`` exactly once, in DFS order.

        With ``params`` the steps carry the policy's (untempered) action
        log-probabilities; without, they carry 0.
        """
        self.check_task(task)
        leaves = self.leaf_count(task.horizon)
        if leaves > limit:
            raise EnumerationTooLarge(leaves, limit)
        out: list[EnumeratedTrajectory] = []

        def visit(state: HistoryState, steps: list, obs_lp: float, pol_lp: float):
            logp = action_logprobs(params, state) if params is not None else None
            for a in range(self.action_count):
                lp_a = float(logp[a]) if logp is not None else 0.0
                for y, lp_y in self.observation_distribution(task, state, a):
                    step = Step(a, lp_a, y, lp_y)
                    nxt = state.extend(a, y)
                    path = steps + [step]
                    if self.is_terminal(task, nxt):
                        o = obs_lp + lp_y
                        out.append(
                            EnumeratedTrajectory(
                                Trajectory(tuple(path), terminated_early=len(path) < task.horizon),
                                math.exp(o),
                                None if params is None else pol_lp + lp_a,
                            )
                        )
                    else:
                        visit(nxt, path, obs_lp + lp_y, pol_lp + lp_a)

        visit(HistoryState(task.context_id), [], 0.0, 0.0)
        return out

    def reachable_states(self, tasks) -> tuple:
        """Sorted keys of every non-terminal history reachable in ``tasks``."""
        seen = set()
        for key in sorted({t.key for t in tasks}):
            task = TaskInstance("_", *key)
            self.check_task(task)
            stack = [HistoryState(task.context_id)]
            visited = set()
            while stack:
                st = stack.pop()
                if st.key in visited:
                    continue
                visited.add(st.key)
                seen.add(st.key)
                for a in range(self.action_count):
                    for y, _ in self.observation_distribution(task, st, a):
                        nxt = st.extend(a, y)
                        if not self.is_terminal(task, nxt):
                            stack.append(nxt)
        return tuple(sorted(seen, key=lambda k: (k[0], len(k[1]), k[1])))

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class HiddenIntentQA(ConversationEnv):
    n_contexts: int = 1
    n_intents: int = 3
    n_attributes: int = 2
    n_values: int = 2
    horizon: int = 3
    adaptive: bool = False
    user_noise: float = 0.0

    kind = "hidden_intent"

    def __post_init__(self):
        if self.n_contexts < 1 or self.n_intents < 1 or self.n_values < 1 or self.n_attributes < 0:
            raise ValidationError("HiddenIntentQA needs contexts, intents, values >= 1 and attributes >= 0")
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if not 0.0 <= self.user_noise < 1.0:
            raise ValidationError(f"user_noise must lie in [0, 1), got {self.user_noise}")

    @property
    def action_count(self) -> int:
        return self.n_attributes + self.n_intents

    @property
    def observation_count(self) -> int:
        return self.n_values + 1

    @property
    def ack(self) -> int:
        return self.n_values

    def attribute(self, intent: int, j: int) -> int:
        return (intent // self.n_values**j) % self.n_values

    def answer_of(self, action: int) -> Optional[int]:
        return action - self.n_attributes if action >= self.n_attributes else None

    def action_style(self, action: int) -> bool:
        # clarifying questions count as the "reasoning" style
        return action < self.n_attributes

    def branching(self, action: int) -> int:
        if action >= self.n_attributes or self.user_noise == 0.0:
            return 1
        return self.n_values

    def observation_distribution(self, task, history, action):
        self.check_action(action)
        if action >= self.n_attributes:
            return [(self.ack, 0.0)]
        truth = self.attribute(task.hidden_intent, action)
        if self.user_noise == 0.0 or self.n_values == 1:
            return [(truth, 0.0)]
        right = math.log1p(-self.user_noise)
        wrong = math.log(self.user_noise / (self.n_values - 1))
        return [(v, right if v == truth else wrong) for v in range(self.n_values)]

    def make_tasks(self, count, rng, prefix="task"):
        if count < 1:
            raise ValidationError("count must be >= 1")
        ctx = rng.integers(0, self.n_contexts, size=count)
        intent = rng.integers(0, self.n_intents, size=count)
        return [
            TaskInstance(f"{prefix}-{i:05d}", int(c), int(g), self.horizon)
            for i, (c, g) in enumerate(zip(ctx, intent))
        ]

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "n_contexts": self.n_contexts,
            "n_intents": self.n_intents,
            "n_attributes": self.n_attributes,
            "n_values": self.n_values,
            "horizon": self.horizon,
            "adaptive": self.adaptive,
            "user_noise": self.user_noise,
        }


SCRIPT = ("solve", "think deeper", "final answer")


@dataclass(frozen=True)
class ScriptedExamQA(ConversationEnv):
    """Multiple-choice exam with a fixed three-line user script.

    The correct choice of context ``c`` is ``answer_key[c]`` (default
    ``c % n_choices``); only the context reveals it, so a policy learns it
    per context.
    """

    n_contexts: int = 4
    n_choices: int = 4
    horizon: int = 3
    answer_key: Optional[tuple] = None

    kind = "scripted_exam"
    adaptive = False
    user_noise = 0.0

    def __post_init__(self):
        if self.n_contexts < 1 or self.n_choices < 1 or self.horizon < 1:
            raise ValidationError("ScriptedExamQA needs contexts, choices and horizon >= 1")
        if self.answer_key is None:
            object.__setattr__(self, "answer_key", tuple(c % self.n_choices for c in range(self.n_contexts)))
        if len(self.answer_key) != self.n_contexts or not all(0 <= k < self.n_choices for k in self.answer_key):
            raise ValidationError("answer_key must give one valid choice per context")

    @property
    def n_intents(self) -> int:
        return self.n_choices

    @property
    def action_count(self) -> int:
        return 2 * self.n_choices

    @property
    def observation_count(self) -> int:
        return len(SCRIPT)

    def answer_of(self, action: int) -> Optional[int]:
        return action // 2

    def action_style(self, action: int) -> bool:
        return action % 2 == 1

    def branching(self, action: int) -> int:
        return 1

    def observation_distribution(self, task, history, action):
        self.check_action(action)
        return [(min(len(history.prefix), len(SCRIPT) - 1), 0.0)]

    def make_tasks(self, count, rng, prefix="task"):
        if count < 1:
            raise ValidationError("count must be >= 1")
        ctx = rng.integers(0, self.n_contexts, size=count)
        return [
            TaskInstance(f"{prefix}-{i:05d}", int(c), self.answer_key[int(c)], self.horizon)
            for i, c in enumerate(ctx)
        ]

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "n_contexts": self.n_contexts,
            "n_choices": self.n_choices,
            "horizon": self.horizon,
            "answer_key": list(self.answer_key),
        }


def make_env(kind: str, **kwargs) -> ConversationEnv:
    if kind == HiddenIntentQA.kind:
        return HiddenIntentQA(**kwargs)
    if kind == ScriptedExamQA.kind:
        if "answer_key" in kwargs and kwargs["answer_key"] is not None:
            kwargs["answer_key"] = tuple(kwargs["answer_key"])
        return ScriptedExamQA(**kwargs)
    raise ValidationError(f"unknown environment kind {kind!r}")


def reference_instance(**overrides) -> HiddenIntentQA:
    """G = 3 intents, K = 2 attributes, V = 2 values, n = 3, deterministic user."""
    params = dict(n_contexts=1, n_intents=3, n_attributes=2, n_values=2, horizon=3, adaptive=False, user_noise=0.0)
    params.update(overrides)
    return HiddenIntentQA(**params)


def make_hidden_intent_tasks(env: ConversationEnv, count: int, rng: np.random.Generator) -> list[TaskInstance]:
    return env.make_tasks(count, rng)

"""Domain types for conversation tasks, trajectories and logged datasets.

A logged dataset is stored as JSONL, one example per line. Reals are written
with 17 significant digits so that a write/read cycle is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np


class ValidationError(ValueError):
    """A record or configuration violates a domain invariant."""


class SchemaError(ValidationError):
    """A serialized record is missing a field or has the wrong type."""


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    context_id: int
    hidden_intent: int
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError(f"task {self.task_id}: horizon must be >= 1, got {self.horizon}")
        if self.context_id < 0 or self.hidden_intent < 0:
            raise ValidationError(f"task {self.task_id}: negative context or intent id")

    @property
    def key(self) -> tuple[int, int, int]:
        """Everything that determines rewards and observations, minus the id."""
        return (self.context_id, self.hidden_intent, self.horizon)


@dataclass(frozen=True, slots=True)
class Step:
    action: int
    behavior_action_logprob: float
    observation: int
    observation_logprob: float

    def __post_init__(self):
        for name in ("behavior_action_logprob", "observation_logprob"):
            v = getattr(self, name)
            if not math.isfinite(v) or v > 0.0:
                raise ValidationError(f"{name} must be finite and <= 0, got {v!r}")
        if self.action < 0 or self.observation < 0:
            raise ValidationError("action and observation ids must be non-negative")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    terminated_early: bool = False

    def __post_init__(self):
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 1:
            raise ValidationError("trajectory must contain at least one step")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> tuple[int, ...]:
        return tuple(s.action for s in self.steps)

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.action, s.observation) for s in self.steps)

    def behavior_logprob(self) -> float:
        return math.fsum(s.behavior_action_logprob for s in self.steps)

    def observation_logprob(self) -> float:
        return math.fsum(s.observation_logprob for s in self.steps)


@dataclass(frozen=True)
class LoggedExample:
    task: TaskInstance
    trajectory: Trajectory
    reward_raw: float
    reward_std: Optional[float] = None
    group_id: str = ""
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.group_id:
            object.__setattr__(self, "group_id", self.task.task_id)
        if not math.isfinite(self.reward_raw):
            raise ValidationError(f"reward_raw must be finite, got {self.reward_raw!r}")
        if self.reward_std is not None and not math.isfinite(self.reward_std):
            raise ValidationError(f"reward_std must be finite, got {self.reward_std!r}")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValidationError(f"temperature must be > 0, got {self.temperature!r}")
        if len(self.trajectory) > self.task.horizon:
            raise ValidationError(
                f"trajectory length {len(self.trajectory)} exceeds horizon {self.task.horizon}"
            )

    def weight(self, use_standardized: bool) -> float:
        if not use_standardized:
            return self.reward_raw
        if self.reward_std is None:
            raise ValidationError(
                f"example in group {self.group_id!r} has no standardized reward; "
                "run attach_standardized first"
            )
        return self.reward_std

    def replace(self, **changes) -> "LoggedExample":
        fields = dict(
            task=self.task,
            trajectory=self.trajectory,
            reward_raw=self.reward_raw,
            reward_std=self.reward_std,
            group_id=self.group_id,
            temperature=self.temperature,
            seed=self.seed,
        )
        fields.update(changes)
        return LoggedExample(**fields)


@dataclass(frozen=True)
class Dataset:
    """Logged examples plus a group index.

    ``unscaled=True`` lifts the [0, 1] reward check; it exists for variance
    diagnostics with rewards on their original scale and is never persisted.
    """

    examples: tuple[LoggedExample, ...] = ()
    unscaled: bool = False
    _groups: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.examples, tuple):
            object.__setattr__(self, "examples", tuple(self.examples))
        groups: dict[str, list[int]] = {}
        task_of: dict[str, str] = {}
        for i, ex in enumerate(self.examples):
            if not self.unscaled and not (0.0 <= ex.reward_raw <= 1.0):
                raise ValidationError(f"record {i}: reward_raw {ex.reward_raw!r} outside [0, 1]")
            tid = task_of.setdefault(ex.group_id, ex.task.task_id)
            if tid != ex.task.task_id:
                raise ValidationError(
                    f"record {i}: group {ex.group_id!r} mixes tasks {tid!r} and {ex.task.task_id!r}"
                )
            groups.setdefault(ex.group_id, []).append(i)
        object.__setattr__(self, "_groups", groups)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[LoggedExample]:
        return iter(self.examples)

    def __getitem__(self, i: int) -> LoggedExample:
        return self.examples[i]

    @property
    def group_index(self) -> dict[str, list[int]]:
        return self._groups

    @property
    def is_standardized(self) -> bool:
        return len(self.examples) > 0 and all(ex.reward_std is not None for ex in self.examples)

    def replace_examples(self, examples: Iterable[LoggedExample]) -> "Dataset":
        return Dataset(tuple(examples), unscaled=self.unscaled)


def group_by_task(dataset: Dataset) -> dict[str, list[LoggedExample]]:
    """Group examples by ``group_id`` in first-appearance order, keeping
    the stored order within each group."""
    return {gid: [dataset.examples[i] for i in idx] for gid, idx in dataset.group_index.items()}


# --- random streams -------------------------------------------------------


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(master_seed, *keys)``.

    Keys are hashed, so the stream for a task does not depend on how many
    other tasks exist or in which order they are processed.
    """
    h = hashlib.sha256(repr((int(master_seed),) + tuple(keys)).encode()).digest()
    words = [int.from_bytes(h[i : i + 4], "little") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def derive_seed(master_seed: int, *keys) -> int:
    h = hashlib.sha256(repr((int(master_seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# --- JSONL ----------------------------------------------------------------


def format_real(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"non-finite real {x!r}")
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def dumps(obj) -> str:
    """Compact JSON with 17-significant-digit reals and sorted-free key order."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_real(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def example_to_record(ex: LoggedExample) -> dict:
    return {
        "task_id": ex.task.task_id,
        "context_id": ex.task.context_id,
        "hidden_intent": ex.task.hidden_intent,
        "horizon": ex.task.horizon,
        "group_id": ex.group_id,
        "temperature": float(ex.temperature),
        "seed": int(ex.seed),
        "steps": [
            {
                "a": s.action,
                "lp_a": float(s.behavior_action_logprob),
                "y": s.observation,
                "lp_y": float(s.observation_logprob),
            }
            for s in ex.trajectory.steps
        ],
        "reward_raw": float(ex.reward_raw),
        "reward_std": None if ex.reward_std is None else float(ex.reward_std),
    }


_TOP_FIELDS = {
    "task_id": str,
    "context_id": int,
    "hidden_intent": int,
    "horizon": int,
    "group_id": str,
    "temperature": float,
    "seed": int,
    "steps": list,
    "reward_raw": float,
}
_STEP_FIELDS = {"a": int, "lp_a": float, "y": int, "lp_y": float}


def _check_type(value, kind, where: str):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SchemaError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")


def record_to_example(rec: dict, where: str = "record") -> LoggedExample:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    for name, kind in _TOP_FIELDS.items():
        if name not in rec:
            raise SchemaError(f"{where}: missing field {name!r}")
        _check_type(rec[name], kind, f"{where}.{name}")
    if "reward_std" not in rec:
        raise SchemaError(f"{where}: missing field 'reward_std'")
    if rec["reward_std"] is not None:
        _check_type(rec["reward_std"], float, f"{where}.reward_std")
    extra = set(rec) - set(_TOP_FIELDS) - {"reward_std"}
    if extra:
        raise SchemaError(f"{where}: unknown fields {sorted(extra)}")
    steps = []
    for j, s in enumerate(rec["steps"]):
        if not isinstance(s, dict):
            raise SchemaError(f"{where}.steps[{j}]: expected a JSON object")
        for name, kind in _STEP_FIELDS.items():
            if name not in s:
                raise SchemaError(f"{where}.steps[{j}]: missing field {name!r}")
            _check_type(s[name], kind, f"{where}.steps[{j}].{name}")
        steps.append(Step(s["a"], float(s["lp_a"]), s["y"], float(s["lp_y"])))
    task = TaskInstance(rec["task_id"], rec["context_id"], rec["hidden_intent"], rec["horizon"])
    return LoggedExample(
        task=task,
        trajectory=Trajectory(tuple(steps), terminated_early=len(steps) < task.horizon),
        reward_raw=float(rec["reward_raw"]),
        reward_std=None if rec["reward_std"] is None else float(rec["reward_std"]),
        group_id=rec["group_id"],
        temperature=float(rec["temperature"]),
        seed=rec["seed"],
    )


def dataset_lines(dataset: Dataset) -> list[str]:
    lines = []
    for i, ex in enumerate(dataset.examples):
        try:
            lines.append(dumps(example_to_record(ex)))
        except ValidationError as err:
            raise ValidationError(f"record {i}: {err}") from None
    return lines


def write_dataset(dataset: Dataset, path) -> None:
    if dataset.unscaled:
        raise ValidationError("unscaled diagnostic datasets are not persisted")
    lines = dataset_lines(dataset)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"{path}:{lineno}: malformed JSON ({err.msg})") from None
            try:
                examples.append(record_to_example(rec, where=f"{path}:{lineno}"))
            except SchemaError:
                raise
            except ValidationError as err:
                raise ValidationError(f"{path}:{lineno}: {err}") from None
    return Dataset(tuple(examples))

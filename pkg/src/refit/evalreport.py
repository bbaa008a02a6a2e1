"""Monte Carlo policy evaluation and comparison tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import ValidationError, derive_rng
from .datagen import rollout
from .policy import PolicyParams
from .reward import RewardSpec

CSV_HEADER = ["method", "accuracy", "accuracy_se", "mean_reward", "mean_reward_se", "mean_len", "episodes"]
MARKED_COLUMNS = ("accuracy", "mean_reward")


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    accuracy_se: float
    mean_reward: float
    mean_reward_se: float
    mean_episode_length: float
    episodes: int

    def __post_init__(self):
        if self.accuracy_se < 0 or self.mean_reward_se < 0:
            raise ValidationError("standard errors must be non-negative")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def evaluate(
    params: PolicyParams,
    env,
    reward_spec: RewardSpec,
    tasks,
    episodes_per_task: int,
    rng: np.random.Generator,
    greedy: bool = False,
) -> EvalMetrics:
    """Roll out every task ``episodes_per_task`` times at temperature 1.

    ``greedy`` samples at temperature 1e-6, which is argmax up to exact
    ties (tied actions stay equally likely).
    """
    if episodes_per_task < 1:
        raise ValidationError("episodes_per_task must be >= 1")
    temperature = 1e-6 if greedy else 1.0
    correct, rewards, lengths = [], [], []
    for task in tasks:
        for _ in range(episodes_per_task):
            ex = rollout(params, env, reward_spec, task, temperature, rng)
            correct.append(1.0 if env.final_answer(ex.trajectory) == task.hidden_intent else 0.0)
            rewards.append(ex.reward_raw)
            lengths.append(len(ex.trajectory))
    correct, rewards = np.array(correct), np.array(rewards)
    return EvalMetrics(
        accuracy=float(np.mean(correct)),
        accuracy_se=_se(correct),
        mean_reward=float(np.mean(rewards)),
        mean_reward_se=_se(rewards),
        mean_episode_length=float(np.mean(lengths)),
        episodes=int(correct.size),
    )


@dataclass
class ComparisonTable:
    rows: dict  # method -> EvalMetrics, in insertion order
    markers: dict = field(default_factory=dict)  # column -> (best, second or None)
    note: str = ""

    def __len__(self) -> int:
        return len(self.rows)


def mark_columns(rows: Mapping[str, EvalMetrics]) -> dict:
    """Best and second-best method per column (higher is better).

    Ties go to the method name that sorts first.
    """
    markers = {}
    for col in MARKED_COLUMNS:
        ranked = sorted(rows, key=lambda name: (-getattr(rows[name], col), name))
        markers[col] = (ranked[0], ranked[1] if len(ranked) > 1 else None)
    return markers


def compare(
    methods: Sequence[tuple[str, PolicyParams]],
    env,
    reward_spec: RewardSpec,
    tasks,
    episodes_per_task: int,
    seed: int,
    greedy: bool = False,
) -> ComparisonTable:
    """Evaluate each method on the same tasks with the same random stream.

    Sharing the stream (common random numbers) makes identical policies
    produce identical rows and keeps the table independent of method order.
    """
    methods = list(methods)
    if len(methods) < 2:
        raise ValidationError("compare needs at least two methods")
    names = [n for n, _ in methods]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValidationError(f"duplicate method names: {dupes}")
    rows = {
        name: evaluate(params, env, reward_spec, tasks, episodes_per_task, derive_rng(seed, "eval"), greedy)
        for name, params in methods
    }
    return ComparisonTable(
        rows,
        mark_columns(rows),
        note="paired evaluation: every method sees the same tasks and random stream",
    )


def _cell(mean: float, se: float) -> str:
    return f"{mean:.4f} ± {se:.4f}"


def table_to_markdown(table: ComparisonTable) -> str:
    lines = []
    if table.note:
        lines += [f"_{table.note}_", ""]
    lines.append("| Method | Accuracy | Reward | Length | Episodes |")
    lines.append("|---|---|---|---|---|")
    for name, m in table.rows.items():
        cells = []
        for col, mean, se in (
            ("accuracy", m.accuracy, m.accuracy_se),
            ("mean_reward", m.mean_reward, m.mean_reward_se),
        ):
            text = _cell(mean, se)
            best, second = table.markers.get(col, (None, None))
            if name == best:
                text = f"**{text}**"
            elif name == second:
                text = f"<u>{text}</u>"
            cells.append(text)
        lines.append(f"| {name} | {cells[0]} | {cells[1]} | {m.mean_episode_length:.2f} | {m.episodes} |")
    return "\n".join(lines) + "\n"


def emit_report(table: ComparisonTable, path, fmt: str = "csv") -> None:
    if len(table.rows) == 0:
        raise ValidationError("cannot emit an empty comparison table")
    path = Path(path)
    if fmt == "markdown":
        path.write_text(table_to_markdown(table), encoding="utf-8")
        return
    if fmt != "csv":
        raise ValidationError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for name, m in table.rows.items():
            w.writerow(
                [
                    name,
                    repr(m.accuracy),
                    repr(m.accuracy_se),
                    repr(m.mean_reward),
                    repr(m.mean_reward_se),
                    repr(m.mean_episode_length),
                    m.episodes,
                ]
            )


def read_report_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValidationError(f"unexpected CSV header {reader.fieldnames}")
        return {
            row["method"]: EvalMetrics(
                float(row["accuracy"]),
                float(row["accuracy_se"]),
                float(row["mean_reward"]),
                float(row["mean_reward_se"]),
                float(row["mean_len"]),
                int(row["episodes"]),
            )
            for row in reader
        }

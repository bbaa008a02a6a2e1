"""Experiment configuration: one TOML file, validated at load, unknown keys rejected."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import tomli

from .core import ValidationError
from .datagen import DatagenConfig
from .env import make_env
from .policy import LinearFeatures, PolicyParams
from .reward import RewardSpec
from .trainers import ALGORITHMS, TrainConfig


@dataclass(frozen=True)
class TaskConfig:
    count: int = 400
    eval_count: int = 100

    def __post_init__(self):
        if self.count < 1 or self.eval_count < 1:
            raise ValidationError("task counts must be >= 1")


@dataclass(frozen=True)
class PolicyConfig:
    family: str = "tabular"

    def __post_init__(self):
        if self.family not in ("tabular", "linear"):
            raise ValidationError(f"policy family must be 'tabular' or 'linear', got {self.family!r}")


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_task: int = 10
    greedy: bool = False

    def __post_init__(self):
        if self.episodes_per_task < 1:
            raise ValidationError("episodes_per_task must be >= 1")


@dataclass(frozen=True)
class VerifyConfig:
    n_theta: int = 100
    n_behavior: int = 1
    theta_scale: float = 1.0

    def __post_init__(self):
        if self.n_theta < 0 or self.n_behavior < 1 or not self.theta_scale > 0:
            raise ValidationError("verify: n_theta >= 0, n_behavior >= 1, theta_scale > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    env: dict = field(default_factory=lambda: {"kind": "hidden_intent"})
    tasks: TaskConfig = TaskConfig()
    policy: PolicyConfig = PolicyConfig()
    reward: RewardSpec = RewardSpec()
    datagen: DatagenConfig = DatagenConfig()
    train: TrainConfig = TrainConfig()
    train_overrides: dict = field(default_factory=dict)  # algo -> TrainConfig
    eval: EvalConfig = EvalConfig()
    verify: VerifyConfig = VerifyConfig()

    def build_env(self):
        return make_env(**self.env)

    def train_config(self, algo: str) -> TrainConfig:
        if algo not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {algo!r}; choose one of {', '.join(ALGORITHMS)}")
        cfg = self.train_overrides.get(algo, self.train)
        mode = "standardized" if algo == "swift" else "raw"
        return replace(cfg, reward_mode=mode)

    def to_dict(self) -> dict:
        d = {
            "master_seed": self.master_seed,
            "env": dict(self.env),
            "tasks": asdict(self.tasks),
            "policy": asdict(self.policy),
            "reward": {**asdict(self.reward), "weights": list(self.reward.weights)},
            "datagen": {
                "m": self.datagen.m,
                "temperatures": list(self.datagen.temperatures),
                "record_tempered_propensity": self.datagen.record_tempered_propensity,
            },
            "train": _train_dict(self.train),
            "eval": asdict(self.eval),
            "verify": asdict(self.verify),
        }
        for algo, cfg in sorted(self.train_overrides.items()):
            d["train"][algo] = _train_dict(cfg)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("reward_mode")
    d["adam_betas"] = list(cfg.adam_betas)
    if d["grad_clip"] is None:
        d.pop("grad_clip")
    return d


def _build(cls, section: dict, name: str, **extra):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"[{name}] unknown keys: {sorted(unknown)}")
    values = dict(section)
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    values.update(extra)
    try:
        return cls(**values)
    except TypeError as err:
        raise ValidationError(f"[{name}] {err}") from None


_TOP = {"master_seed", "env", "tasks", "policy", "reward", "datagen", "train", "eval", "verify"}


def config_from_dict(raw: dict, seed: Optional[int] = None) -> ExperimentConfig:
    unknown = set(raw) - _TOP
    if unknown:
        raise ValidationError(f"unknown top-level keys: {sorted(unknown)}")
    master_seed = int(raw.get("master_seed", 0) if seed is None else seed)
    env_section = dict(raw.get("env", {"kind": "hidden_intent"}))
    env_section.setdefault("kind", "hidden_intent")
    try:
        make_env(**env_section)
    except TypeError as err:
        raise ValidationError(f"[env] {err}") from None
    datagen_section = dict(raw.get("datagen", {}))
    if "master_seed" in datagen_section:
        raise ValidationError("[datagen] master_seed is set at the top level")
    train_section = dict(raw.get("train", {}))
    overrides = {}
    for algo in ALGORITHMS:
        if algo in train_section:
            sub = train_section.pop(algo)
            if "reward_mode" in sub:
                raise ValidationError(f"[train.{algo}] reward_mode is implied by the algorithm")
            overrides[algo] = sub
    if "reward_mode" in train_section:
        raise ValidationError("[train] reward_mode is implied by the algorithm")
    base_train = _build(TrainConfig, train_section, "train")
    return ExperimentConfig(
        master_seed=master_seed,
        env=env_section,
        tasks=_build(TaskConfig, raw.get("tasks", {}), "tasks"),
        policy=_build(PolicyConfig, raw.get("policy", {}), "policy"),
        reward=_build(RewardSpec, raw.get("reward", {}), "reward"),
        datagen=_build(DatagenConfig, datagen_section, "datagen", master_seed=master_seed),
        train=base_train,
        train_overrides={
            algo: _build(TrainConfig, {**_train_dict(base_train), **sub}, f"train.{algo}")
            for algo, sub in overrides.items()
        },
        eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
        verify=_build(VerifyConfig, raw.get("verify", {}), "verify"),
    )


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        raw = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as err:
        raise ValidationError(f"{path}: {err}") from None
    return config_from_dict(raw, seed)


def to_toml(d: dict, prefix: str = "") -> str:
    """Render a nested dict of scalars and lists as TOML."""
    scalars = [(k, v) for k, v in d.items() if not isinstance(v, dict)]
    tables = [(k, v) for k, v in d.items() if isinstance(v, dict)]
    lines = [f"{k} = {_toml_value(v)}" for k, v in scalars]
    out = "\n".join(lines)
    for k, v in tables:
        name = f"{prefix}{k}"
        body = to_toml(v, prefix=name + ".")
        out += ("\n\n" if out else "") + f"[{name}]\n" + body
    return out.strip("\n") + "\n" if not prefix else out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ValidationError(f"cannot render {v!r} as TOML")


# --- experiment objects derived from a config ------------------------------


def all_task_keys(env) -> list:
    """One representative task per (context, intent) the env can produce."""
    from .core import TaskInstance

    keys = []
    for c in range(env.n_contexts):
        intents = [env.answer_key[c]] if hasattr(env, "answer_key") else range(env.n_intents)
        for g in intents:
            keys.append(TaskInstance(f"key-{c}-{g}", c, g, env.horizon))
    return keys


def initial_policy(cfg: ExperimentConfig, env) -> PolicyParams:
    """The uniform behavior policy in the configured family."""
    if cfg.policy.family == "tabular":
        return PolicyParams.tabular(env.reachable_states(all_task_keys(env)), env.action_count)
    fm = LinearFeatures(env.n_contexts, env.action_count, env.observation_count)
    return PolicyParams.linear(fm, env.action_count)


def make_task_sets(cfg: ExperimentConfig, env):
    from .core import derive_rng

    train = env.make_tasks(cfg.tasks.count, derive_rng(cfg.master_seed, "tasks", "train"), prefix="train")
    held_out = env.make_tasks(cfg.tasks.eval_count, derive_rng(cfg.master_seed, "tasks", "eval"), prefix="eval")
    return train, held_out

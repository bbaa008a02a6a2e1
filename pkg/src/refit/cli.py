"""Command-line entry point: datagen, train, eval, verify-bounds, report.

Exit codes: 0 ok, 1 validation, 2 I/O, 3 capability (enumeration guard).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, initial_policy, load_config, make_task_sets, to_toml
from .core import ValidationError, dataset_lines, derive_rng, derive_seed, dumps, format_real, read_dataset
from .datagen import attach_standardized, generate_dataset
from .env import MAX_LEAVES, EnumerationTooLarge
from .evalreport import compare, emit_report, table_to_markdown
from .objectives import exact_value, verify_lemma1, verify_lemma3
from .policy import load_policy, policy_to_dict
from .trainers import (
    ALGORITHMS,
    train_dpo,
    train_refit,
    train_step_dpo,
    train_swift,
    train_threshold_sft,
)

log = logging.getLogger("refit")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_CAPABILITY = 0, 1, 2, 3

DATASET_FILE = "dataset.jsonl"
CHECKPOINT_SUFFIX = ".policy.json"


class _Outputs:
    """Collects file contents and writes them only once everything succeeded."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def commit(self, cfg: ExperimentConfig, command: str, manifest_name: str):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": command,
            "master_seed": cfg.master_seed,
            "config_hash": cfg.config_hash(),
            "artifacts": {
                name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(self.files.items())
            },
        }
        self.files[manifest_name] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        for name, text in self.files.items():
            with open(self.out_dir / name, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)


def _dataset_text(dataset) -> str:
    return "".join(line + "\n" for line in dataset_lines(dataset))


# --- commands ---------------------------------------------------------------


def cmd_datagen(cfg: ExperimentConfig, args) -> int:
    env = cfg.build_env()
    train_tasks, _ = make_task_sets(cfg, env)
    behavior = initial_policy(cfg, env)
    dataset = generate_dataset(behavior, env, cfg.reward, train_tasks, cfg.datagen)
    if cfg.datagen.m >= 2:
        dataset = attach_standardized(dataset)
    out = _Outputs(Path(args.out))
    out.add(DATASET_FILE, _dataset_text(dataset))
    out.commit(cfg, "datagen", "manifest.json")
    log.info("wrote %d examples to %s", len(dataset), Path(args.out) / DATASET_FILE)
    return EXIT_OK


def _value_fn(cfg, env, tasks):
    """Exact online value per epoch, or None when enumeration is too large."""
    if env.leaf_count(env.horizon) > MAX_LEAVES:
        log.warning("env too large to enumerate; exact_value column left empty")
        return None
    return lambda p: exact_value(p, env, cfg.reward, tasks)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    algo = args.algo
    if algo not in ALGORITHMS:
        raise ValidationError(f"unknown algorithm {algo!r}; valid: {', '.join(ALGORITHMS)}")
    tcfg = cfg.train_config(algo)
    env = cfg.build_env()
    train_tasks, _ = make_task_sets(cfg, env)
    dataset_path = Path(args.dataset) if args.dataset else Path(args.out) / DATASET_FILE
    dataset = read_dataset(dataset_path)
    if algo == "swift" and not dataset.is_standardized:
        raise ValidationError(
            f"{dataset_path} has no standardized rewards; regenerate with m >= 2 so that "
            "attach_standardized runs, or call attach_standardized on the dataset"
        )
    for ex in dataset:
        env.check_trajectory(ex.task, ex.trajectory)
    theta0 = initial_policy(cfg, env)
    value_fn = _value_fn(cfg, env, train_tasks)
    if algo == "refit":
        result = train_refit(theta0, dataset, tcfg, value_fn)
    elif algo == "swift":
        result = train_swift(theta0, dataset, tcfg, value_fn)
    elif algo == "threshold-sft":
        result = train_threshold_sft(theta0, dataset, tcfg, value_fn)
    elif algo == "dpo":
        result = train_dpo(theta0, theta0, dataset, tcfg, value_fn)
    else:
        seed = derive_seed(cfg.master_seed, "step-dpo")
        result = train_step_dpo(theta0, theta0, theta0, env, cfg.reward, dataset, tcfg, seed, value_fn)
    trace = io.StringIO()
    w = csv.writer(trace, lineterminator="\n")
    w.writerow(["epoch", "offline_objective", "exact_value"])
    values = result.value_trace or [None] * len(result.objective_trace)
    for e, (obj, val) in enumerate(zip(result.objective_trace, values), start=1):
        w.writerow([e, format_real(obj), "" if val is None else format_real(val)])
    out = _Outputs(Path(args.out))
    out.add(f"{algo}{CHECKPOINT_SUFFIX}", dumps(policy_to_dict(result.params)) + "\n")
    out.add(f"{algo}.trace.csv", trace.getvalue())
    out.commit(cfg, f"train --algo {algo}", f"{algo}.manifest.json")
    log.info("%s: %d updates, %d skipped", algo, result.updates, result.skipped)
    return EXIT_OK


def _checkpoints(args) -> list[tuple[str, Path]]:
    paths = [Path(p) for p in (args.checkpoint or [])]
    if not paths:
        paths = sorted(Path(args.out).glob(f"*{CHECKPOINT_SUFFIX}"))
    return [(p.name[: -len(CHECKPOINT_SUFFIX)] if p.name.endswith(CHECKPOINT_SUFFIX) else p.stem, p) for p in paths]


def _compare_table(cfg, args):
    env = cfg.build_env()
    _, eval_tasks = make_task_sets(cfg, env)
    methods = [("base", initial_policy(cfg, env))]
    for name, path in _checkpoints(args):
        params = load_policy(path)
        if params.n_actions != env.action_count:
            raise ValidationError(f"{path}: policy has {params.n_actions} actions, env has {env.action_count}")
        methods.append((name, params))
    return compare(
        methods,
        env,
        cfg.reward,
        eval_tasks,
        cfg.eval.episodes_per_task,
        derive_seed(cfg.master_seed, "eval"),
        greedy=cfg.eval.greedy,
    )


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    table = _compare_table(cfg, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(table, out_dir / "eval.csv", "csv")
    sys.stdout.write(table_to_markdown(table))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    table = _compare_table(cfg, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_report(table, out_dir / "report.csv", "csv")
    emit_report(table, out_dir / "report.md", "markdown")
    files = {n: (out_dir / n).read_text(encoding="utf-8") for n in ("report.csv", "report.md")}
    out = _Outputs(out_dir)
    for n, text in files.items():
        out.add(n, text)
    out.commit(cfg, "report", "report.manifest.json")
    sys.stdout.write(table_to_markdown(table))
    return EXIT_OK


def cmd_verify_bounds(cfg: ExperimentConfig, args) -> int:
    env = cfg.build_env()
    train_tasks, _ = make_task_sets(cfg, env)
    leaves = env.leaf_count(env.horizon)
    if leaves > MAX_LEAVES:
        raise EnumerationTooLarge(leaves)
    base = initial_policy(cfg, env)
    rng = derive_rng(cfg.master_seed, "verify-bounds")
    behaviors = [base] + [
        base.with_values(rng.normal(scale=cfg.verify.theta_scale, size=base.values.size))
        for _ in range(cfg.verify.n_behavior - 1)
    ]
    targets = [("theta0", None)] + [
        (f"random-{i}", rng.normal(scale=cfg.verify.theta_scale, size=base.values.size))
        for i in range(cfg.verify.n_theta)
    ]
    for name, path in _checkpoints(args) if args.checkpoint else []:
        targets.append((name, load_policy(path).values))
    reports = []
    ok = True
    for b, behavior in enumerate(behaviors):
        for name, values in targets:
            params = behavior if values is None else behavior.with_values(values)
            for rep in (
                verify_lemma1(params, behavior, env, cfg.reward, train_tasks),
                verify_lemma3(params, behavior, env, cfg.reward, train_tasks),
            ):
                ok &= rep.satisfied
                reports.append({"behavior": b, "theta": name, **rep.to_dict()})
    out = _Outputs(Path(args.out))
    out.add("bounds.json", json.dumps(reports, indent=1) + "\n")
    out.commit(cfg, "verify-bounds", "bounds.manifest.json")
    n_bad = sum(not r["satisfied"] for r in reports)
    log.info("%d bound reports, %d violated", len(reports), n_bad)
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-bounds": cmd_verify_bounds,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--out", default="runs", help="experiment directory")
        p.add_argument("--jobs", type=int, default=1, help="worker cap (commands run in one process)")
        p.add_argument("--print-effective-config", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--algo", required=True, help=f"one of {', '.join(ALGORITHMS)}")
            p.add_argument("--dataset", default=None, help=f"defaults to <out>/{DATASET_FILE}")
        if name in ("eval", "report", "verify-bounds"):
            p.add_argument("--checkpoint", action="append", help="policy checkpoint (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1")
        cfg = load_config(args.config, seed=args.seed)
        if args.print_effective_config:
            sys.stdout.write(to_toml(cfg.to_dict()))
        return COMMANDS[args.command](cfg, args)
    except EnumerationTooLarge as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CAPABILITY
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

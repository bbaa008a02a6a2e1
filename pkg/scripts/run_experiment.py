"""Train every algorithm on one config over several seeds and print exact values.

    python3 scripts/run_experiment.py --config configs/reference.toml --seeds 5
"""
import argparse

import numpy as np

from refit.config import initial_policy, load_config, make_task_sets
from refit.datagen import attach_standardized, generate_dataset
from refit.core import derive_seed
from refit.objectives import exact_value
from refit.trainers import (
    ALGORITHMS,
    train_dpo,
    train_refit,
    train_step_dpo,
    train_swift,
    train_threshold_sft,
)


def run_seed(path, seed):
    cfg = load_config(path, seed=seed)
    env = cfg.build_env()
    train_tasks, eval_tasks = make_task_sets(cfg, env)
    theta0 = initial_policy(cfg, env)
    ds = generate_dataset(theta0, env, cfg.reward, train_tasks, cfg.datagen)
    if cfg.datagen.m >= 2:
        ds = attach_standardized(ds)
    out = {"base": theta0}
    for algo in ALGORITHMS:
        if algo == "swift" and not ds.is_standardized:
            continue
        tcfg = cfg.train_config(algo)
        if algo == "refit":
            out[algo] = train_refit(theta0, ds, tcfg).params
        elif algo == "swift":
            out[algo] = train_swift(theta0, ds, tcfg).params
        elif algo == "threshold-sft":
            out[algo] = train_threshold_sft(theta0, ds, tcfg).params
        elif algo == "dpo":
            out[algo] = train_dpo(theta0, theta0, ds, tcfg).params
        else:
            step_seed = derive_seed(cfg.master_seed, "step-dpo")
            out[algo] = train_step_dpo(theta0, theta0, theta0, env, cfg.reward, ds, tcfg, step_seed).params
    return {name: exact_value(p, env, cfg.reward, eval_tasks) for name, p in out.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/reference.toml")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    rows = [run_seed(args.config, s) for s in range(args.seeds)]
    print(f"{'method':<15}{'median':>9}{'min':>9}{'max':>9}")
    for name in rows[0]:
        v = np.array([r[name] for r in rows])
        print(f"{name:<15}{np.median(v):>9.4f}{v.min():>9.4f}{v.max():>9.4f}")


if __name__ == "__main__":
    main()

"""Gradient variance of raw versus standardized weighting as rewards shift.

Draws rewards from U[0, 1], adds an offset, and reports the per-example
gradient variance at the uniform policy for both weightings.
"""
import argparse

import numpy as np

from refit.datagen import DatagenConfig, attach_standardized, generate_dataset, shift_rewards
from refit.env import reference_instance
from refit.objectives import gradient_variance
from refit.policy import PolicyParams
from refit.reward import RewardSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tasks", type=int, default=400)
    ap.add_argument("--offsets", type=float, nargs="+", default=[0.0, 1.0, 3.0, 9.0, 30.0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    env, spec = reference_instance(), RewardSpec()
    rng = np.random.default_rng(args.seed)
    tasks = env.make_tasks(args.tasks, rng)
    uniform = PolicyParams.tabular(env.reachable_states(tasks), env.action_count)
    ds = generate_dataset(uniform, env, spec, tasks, DatagenConfig(m=3, temperatures=(1.0,), master_seed=args.seed))
    base = ds.replace_examples(e.replace(reward_raw=float(rng.random()), reward_std=None) for e in ds)

    print(f"{'offset':>8}{'raw':>12}{'standardized':>14}{'ratio':>9}")
    for off in args.offsets:
        shifted = attach_standardized(shift_rewards(base, off))
        raw = gradient_variance(uniform, shifted, False)
        std = gradient_variance(uniform, shifted, True)
        print(f"{off:>8.1f}{raw:>12.4f}{std:>14.4f}{raw / std:>9.1f}")


if __name__ == "__main__":
    main()

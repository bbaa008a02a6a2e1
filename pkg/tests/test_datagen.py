from collections import Counter

import numpy as np
import pytest
from scipy import stats

from refit.core import Dataset, TaskInstance, ValidationError, write_dataset
from refit.datagen import DatagenConfig, attach_standardized, generate_dataset, rollout, shift_rewards
from refit.env import HiddenIntentQA
from refit.objectives import ips_ratios
from refit.policy import LinearFeatures, PolicyParams
from refit.reward import RewardSpec

from conftest import random_like


def test_rollout_reproducible(env, spec, uniform):
    task = TaskInstance("t", 0, 2, 3)
    a = rollout(uniform, env, spec, task, 1.0, np.random.default_rng(8))
    b = rollout(uniform, env, spec, task, 1.0, np.random.default_rng(8))
    assert a == b


def test_rollout_length_is_horizon(env, spec, uniform):
    rng = np.random.default_rng(0)
    for g in range(3):
        ex = rollout(uniform, env, spec, TaskInstance("t", 0, g, 3), 1.0, rng)
        assert len(ex.trajectory) == 3 and not ex.trajectory.terminated_early


def test_rollouts_match_enumeration_chi2(spec):
    env = HiddenIntentQA(n_intents=2, n_attributes=1, n_values=2, horizon=2, user_noise=0.2)
    task = TaskInstance("t", 0, 0, 2)
    fm = LinearFeatures(1, env.action_count, env.observation_count)
    p = PolicyParams.linear(fm, env.action_count, np.random.default_rng(1).normal(size=fm.dim * env.action_count))
    trajs = env.enumerate_trajectories(task, p)
    index = {et.trajectory.pairs: i for i, et in enumerate(trajs)}
    rng = np.random.default_rng(2)
    n = 10_000
    counts = Counter(index[rollout(p, env, spec, task, 1.0, rng).trajectory.pairs] for _ in range(n))
    observed = [counts[i] for i in range(len(trajs))]
    assert stats.chisquare(observed, [et.probability * n for et in trajs]).pvalue > 1e-3


def test_five_hundred_tasks_three_runs(env, spec, uniform):
    tasks = env.make_tasks(500, np.random.default_rng(0))
    ds = generate_dataset(uniform, env, spec, tasks, DatagenConfig(m=3))
    assert len(ds) == 1500
    groups = ds.group_index
    assert len(groups) == 500 and {len(v) for v in groups.values()} == {3}
    temps = [ds[i].temperature for i in groups[tasks[0].task_id]]
    assert temps == [0.7, 1.0, 1.3]


def test_same_seed_byte_identical(tmp_path, env, spec, uniform):
    tasks = env.make_tasks(20, np.random.default_rng(0))
    for name in ("a", "b"):
        write_dataset(generate_dataset(uniform, env, spec, tasks, DatagenConfig(master_seed=5)), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_task_streams_independent_of_order(env, spec, uniform):
    tasks = env.make_tasks(10, np.random.default_rng(0))
    fwd = generate_dataset(uniform, env, spec, tasks, DatagenConfig())
    rev = generate_dataset(uniform, env, spec, tasks[::-1], DatagenConfig())
    key = lambda ds: sorted((e.task.task_id, e.seed, e.trajectory.pairs) for e in ds)
    assert key(fwd) == key(rev)


def test_single_rollout_cannot_standardize(env, spec, uniform):
    tasks = env.make_tasks(5, np.random.default_rng(0))
    ds = generate_dataset(uniform, env, spec, tasks, DatagenConfig(m=1, temperatures=(1.0,)))
    assert len(ds) == 5
    with pytest.raises(ValidationError, match="task-00000"):
        attach_standardized(ds)


def _with_rewards(ds, rewards):
    return ds.replace_examples(e.replace(reward_raw=r) for e, r in zip(ds, rewards))


def test_attach_standardized_arithmetic(env, spec, uniform):
    tasks = [TaskInstance("t", 0, 0, 3)]
    ds = _with_rewards(generate_dataset(uniform, env, spec, tasks, DatagenConfig()), [1.0, 0.0, 0.5])
    out = attach_standardized(ds)
    assert [e.reward_std for e in out] == [1.0, -1.0, 0.0]
    assert [e.reward_raw for e in out] == [1.0, 0.0, 0.5]


def test_attach_standardized_degenerate_and_idempotent(env, spec, uniform):
    tasks = [TaskInstance("t", 0, 0, 3)]
    ds = _with_rewards(generate_dataset(uniform, env, spec, tasks, DatagenConfig()), [0.4, 0.4, 0.4])
    once = attach_standardized(ds)
    assert [e.reward_std for e in once] == [0.0, 0.0, 0.0]
    assert attach_standardized(once) == once


def test_tempered_propensities_give_unit_ips_ratios(env, spec, uniform):
    rng = np.random.default_rng(3)
    behavior = random_like(uniform, rng)
    tasks = env.make_tasks(30, rng)
    ds = generate_dataset(behavior, env, spec, tasks, DatagenConfig())
    for T in DatagenConfig().temperatures:
        subset = ds.replace_examples(e for e in ds if e.temperature == T)
        tempered = behavior.with_values(behavior.values / T)
        assert np.all(ips_ratios(subset, tempered) == 1.0)


def test_untempered_propensities_differ(env, spec, uniform):
    behavior = random_like(uniform, np.random.default_rng(3))
    tasks = env.make_tasks(10, np.random.default_rng(0))
    cfg = DatagenConfig(temperatures=(0.5,), record_tempered_propensity=False)
    ds = generate_dataset(behavior, env, spec, tasks, cfg)
    assert np.allclose(ips_ratios(ds, behavior), 1.0)
    assert not np.allclose(ips_ratios(ds, behavior.with_values(behavior.values / 0.5)), 1.0)


def test_shift_rewards_is_unscaled(env, spec, uniform):
    tasks = env.make_tasks(4, np.random.default_rng(0))
    ds = attach_standardized(generate_dataset(uniform, env, spec, tasks, DatagenConfig()))
    shifted = shift_rewards(ds, 9.0)
    assert shifted.unscaled and not shifted.is_standardized
    assert [e.reward_raw for e in shifted] == [e.reward_raw + 9.0 for e in ds]
    with pytest.raises(ValidationError):
        Dataset(shifted.examples)


@pytest.mark.parametrize("kw", [{"m": 0}, {"temperatures": ()}, {"temperatures": (1.0, 0.0)}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        DatagenConfig(**kw)


def test_empty_task_list(env, spec, uniform):
    with pytest.raises(ValidationError):
        generate_dataset(uniform, env, spec, [], DatagenConfig())

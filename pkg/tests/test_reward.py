import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from refit.core import Step, TaskInstance, Trajectory, ValidationError
from refit.env import HiddenIntentQA, ScriptedExamQA
from refit.policy import HistoryState
from refit.reward import (
    RewardSpec,
    apply_discount,
    judge_components,
    raw_reward,
    rescale,
    standardize_group,
    trajectory_reward,
)

ENV = HiddenIntentQA()  # 2 clarifiers, then answers 0..2
TASK = TaskInstance("t", 0, 1, 3)


def traj(*actions, env=ENV, task=TASK):
    steps, state = [], HistoryState(task.context_id)
    for a in actions:
        y, lp = env.observation_distribution(task, state, a)[0]
        steps.append(Step(a, 0.0, y, lp))
        state = state.extend(a, y)
    return Trajectory(tuple(steps))


def test_exact_match_correct_and_wrong():
    assert raw_reward(RewardSpec(), ENV, TASK, traj(0, 1, 3)) == 10.0
    assert raw_reward(RewardSpec(), ENV, TASK, traj(0, 1, 2)) == 0.0


def test_clarifier_last_is_not_an_answer():
    assert raw_reward(RewardSpec(), ENV, TASK, traj(3, 3, 0)) == 0.0


def test_judge_with_accuracy_only_equals_exact_match():
    judge = RewardSpec(mode="judge_stub", weights=(1, 0, 0))
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = traj(*rng.integers(0, ENV.action_count, size=3))
        assert raw_reward(judge, ENV, TASK, t) == raw_reward(RewardSpec(), ENV, TASK, t)


def test_judge_components_scripted():
    env = ScriptedExamQA()
    task = TaskInstance("t", 2, env.answer_key[2], 3)
    t = traj(5, 4, 5, env=env, task=task)  # choice 2, styles 1, 0, 1
    acc, style, brevity = judge_components(env, task, t)
    assert (acc, brevity) == (1.0, 1 / 3)
    assert style == pytest.approx(2 / 3)
    spec = RewardSpec(mode="judge_stub", weights=(0.5, 0.5, 0.0))
    assert raw_reward(spec, env, task, t) == pytest.approx(10 * (0.5 + 1 / 3))


def test_non_terminal_rejected():
    with pytest.raises(ValidationError):
        raw_reward(RewardSpec(), ENV, TASK, traj(0, 3))


@pytest.mark.parametrize("r10,expected", [(10, 1.0), (0, 0.0), (7.19, 0.719)])
def test_rescale(r10, expected):
    assert rescale(r10) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("bad", [-0.1, 10.5])
def test_rescale_out_of_range(bad):
    with pytest.raises(ValidationError):
        rescale(bad)


def test_discount_examples():
    assert apply_discount(1.0, 2, 0.9) == pytest.approx(0.81, abs=1e-15)
    assert apply_discount(0.37, 3, 1.0) == 0.37
    assert all(apply_discount(0.0, n, g) == 0.0 for n in (1, 5) for g in (0.5, 1.0))


def test_discount_applies_on_adaptive_env_only():
    spec = RewardSpec(gamma=0.9)
    adaptive = HiddenIntentQA(adaptive=True)
    t = traj(0, 3, env=adaptive)
    assert trajectory_reward(spec, adaptive, TASK, t) == pytest.approx(0.81)
    assert trajectory_reward(spec, ENV, TASK, traj(0, 1, 3)) == 1.0


@pytest.mark.parametrize("weights,gamma", [((0.5, 0.5, 0.5), 1.0), ((1, 0, 0), 0.0), ((1, 0, 0), 1.1)])
def test_reward_spec_validation(weights, gamma):
    with pytest.raises(ValidationError):
        RewardSpec(mode="judge_stub", weights=weights, gamma=gamma)


def test_standardize_arithmetic():
    stats, z = standardize_group([1.0, 2.0, 3.0])
    assert (stats.mu_hat, stats.sigma_hat, stats.m) == (2.0, 1.0, 3)
    assert z == [-1.0, 0.0, 1.0]


def test_standardize_degenerate():
    stats, z = standardize_group([0.5, 0.5, 0.5])
    assert stats.sigma_hat == 0.0
    assert z == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("rewards", [[], [0.3]])
def test_standardize_needs_two(rewards):
    with pytest.raises(ValidationError):
        standardize_group(rewards)


def test_standardize_recomputation_oracle():
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    for _ in range(10_000):
        m = int(rng.integers(2, 9))
        r = rng.random(m)
        _, z = standardize_group(list(r))
        z = np.array(z)
        worst_mean = max(worst_mean, abs(z.mean()))
        worst_std = max(worst_std, abs(z.std(ddof=1) - 1.0))
    assert worst_mean <= 1e-9 and worst_std <= 1e-9


finite = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=100)
@given(st.lists(finite, min_size=2, max_size=12), st.floats(-100, 100), st.floats(0.01, 100))
def test_standardize_affine_invariance(r, c, k):
    _, base = standardize_group(r)
    assume(any(b != 0 for b in base))
    assume(np.std(r) > 1e-6)
    _, shifted = standardize_group([c + x for x in r])
    _, scaled = standardize_group([k * x for x in r])
    np.testing.assert_allclose(shifted, base, atol=1e-6)
    np.testing.assert_allclose(scaled, base, atol=1e-9)


@given(st.lists(finite, min_size=2, max_size=12))
def test_standardize_deterministic(r):
    assert standardize_group(r) == standardize_group(list(r))


def test_standardize_cost_is_linear():
    rng = np.random.default_rng(0)
    sizes = [20_000, 40_000, 80_000, 160_000]
    times = []
    for m in sizes:
        r = list(rng.random(m))
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            standardize_group(r)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    assert 0.6 < slope < 1.4


@given(st.floats(0.0, 1.0), st.integers(2, 20))
def test_constant_group_is_exactly_degenerate(x, m):
    stats, z = standardize_group([x] * m)
    assert stats.sigma_hat == 0.0 and stats.mu_hat == x
    assert z == [0.0] * m

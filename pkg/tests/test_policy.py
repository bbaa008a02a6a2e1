import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from refit.core import Step, TaskInstance, Trajectory, ValidationError
from refit.env import HiddenIntentQA
from refit.policy import (
    HistoryState,
    LinearFeatures,
    PolicyParams,
    action_logits,
    action_logprob,
    action_logprobs,
    grad_action_logprob,
    load_policy,
    sample_action,
    save_policy,
    trajectory_logprob,
)

FM = LinearFeatures(n_contexts=2, n_actions=3, n_observations=3)


def random_state(rng, fm=FM, max_len=3):
    prefix = tuple(
        (int(rng.integers(fm.n_actions)), int(rng.integers(fm.n_observations)))
        for _ in range(rng.integers(max_len + 1))
    )
    return HistoryState(int(rng.integers(fm.n_contexts)), prefix)


def random_linear(rng, scale=1.0):
    return PolicyParams.linear(FM, 3, rng.normal(scale=scale, size=FM.dim * 3))


def test_zero_linear_logits():
    p = PolicyParams.linear(FM, 3)
    assert np.array_equal(action_logits(p, HistoryState(1, ((0, 2),))), np.zeros(3))


def test_unseen_tabular_state_is_uniform():
    p = PolicyParams.tabular([(0, ())], 4, np.arange(4.0))
    assert np.array_equal(action_logits(p, HistoryState(0, ((1, 1),))), np.zeros(4))


def test_hand_matrix_times_unit_feature():
    fm = LinearFeatures(n_contexts=2, n_actions=1, n_observations=0)
    W = np.array([[1.5, -2.0], [0.25, 4.0]])  # rows are actions
    p = PolicyParams.linear(fm, 2, W.ravel())
    # context 1 one-hot picks the second column
    assert np.array_equal(action_logits(p, HistoryState(1)), np.array([-2.0, 4.0]))


def test_uniform_logprob():
    p = PolicyParams.tabular([], 4)
    assert action_logprob(p, HistoryState(0), 2) == pytest.approx(math.log(0.25), abs=1e-15)
    assert action_logprob(p, HistoryState(0), 2) == pytest.approx(-1.386294, abs=1e-6)


def test_softmax_closed_form():
    p = PolicyParams.tabular([(0, ())], 2, [0.0, math.log(3.0)])
    probs = np.exp(action_logprobs(p, HistoryState(0)))
    np.testing.assert_allclose(probs, [0.25, 0.75], rtol=0, atol=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_normalization(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_linear(rng, scale)
    lp = action_logprobs(p, random_state(rng))
    assert abs(math.fsum(np.exp(lp)) - 1.0) <= 1e-12


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_logit_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=4)
    p = PolicyParams.tabular([(0, ())], 4, values)
    q = PolicyParams.tabular([(0, ())], 4, values + c)
    np.testing.assert_allclose(action_logprobs(p, HistoryState(0)), action_logprobs(q, HistoryState(0)), atol=1e-12)


def test_out_of_range_action():
    p = PolicyParams.tabular([], 3)
    with pytest.raises(ValidationError):
        action_logprob(p, HistoryState(0), 3)


def test_large_temperature_is_uniform_chi2():
    p = PolicyParams.linear(FM, 3)
    rng = np.random.default_rng(11)
    counts = np.zeros(3)
    for _ in range(10_000):
        a, _ = sample_action(p, HistoryState(0), 1e6, rng)
        counts[a] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_tempered_sampling_matches_distribution_chi2():
    p = PolicyParams.tabular([(0, ())], 3, [0.0, 1.0, 2.0])
    T = 1.3
    expected = np.exp(action_logprobs(p.with_values(p.values / T), HistoryState(0)))
    rng = np.random.default_rng(5)
    counts = np.zeros(3)
    for _ in range(10_000):
        counts[sample_action(p, HistoryState(0), T, rng)[0]] += 1
    assert stats.chisquare(counts, expected * counts.sum()).pvalue > 1e-3


def test_unit_temperature_logprob_matches():
    rng = np.random.default_rng(3)
    p = random_linear(rng)
    s = random_state(rng)
    a, lp = sample_action(p, s, 1.0, rng)
    assert lp == pytest.approx(action_logprob(p, s, a), abs=1e-15)


def test_cloned_rng_gives_identical_samples():
    p = random_linear(np.random.default_rng(0))
    r1 = np.random.default_rng(42)
    r2 = np.random.default_rng(42)
    s = HistoryState(0)
    assert [sample_action(p, s, 0.7, r1) for _ in range(20)] == [sample_action(p, s, 0.7, r2) for _ in range(20)]


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_non_positive_temperature(T):
    with pytest.raises(ValidationError):
        sample_action(PolicyParams.tabular([], 2), HistoryState(0), T, np.random.default_rng(0))


def _fd_grad(p, s, a, eps=1e-5):
    g = np.zeros(p.values.size)
    for i in range(p.values.size):
        up, dn = p.values.copy(), p.values.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (action_logprob(p.with_values(up), s, a) - action_logprob(p.with_values(dn), s, a)) / (2 * eps)
    return g


@pytest.mark.parametrize("family", ["linear", "tabular"])
def test_gradient_matches_finite_differences(family):
    rng = np.random.default_rng(7)
    keys = [(0, ()), (1, ()), (0, ((1, 2),))]
    worst = 0.0
    for _ in range(100):
        if family == "linear":
            p, s = random_linear(rng), random_state(rng)
        else:
            p = PolicyParams.tabular(keys, 3, rng.normal(size=9))
            s = HistoryState(*keys[rng.integers(3)])
        a = int(rng.integers(3))
        g, fd = grad_action_logprob(p, s, a), _fd_grad(p, s, a)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst <= 1e-6


def test_uniform_two_action_gradient_block():
    fm = LinearFeatures(n_contexts=1, n_actions=1, n_observations=1)
    p = PolicyParams.linear(fm, 2)
    s = HistoryState(0, ((0, 0),))
    phi = fm(s)
    g = grad_action_logprob(p, s, 0).reshape(2, fm.dim)
    np.testing.assert_allclose(g, np.outer([0.5, -0.5], phi), atol=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_score_has_zero_mean(seed):
    rng = np.random.default_rng(seed)
    p, s = random_linear(rng, 2.0), random_state(rng)
    probs = np.exp(action_logprobs(p, s))
    mean = sum(probs[a] * grad_action_logprob(p, s, a) for a in range(3))
    assert np.max(np.abs(mean)) <= 1e-12


def test_linear_gradient_sums_to_zero_over_actions():
    rng = np.random.default_rng(1)
    p, s = random_linear(rng), random_state(rng)
    g = grad_action_logprob(p, s, 1).reshape(p.shape)
    assert np.max(np.abs(g.sum(axis=0))) <= 1e-12


def _det_env():
    return HiddenIntentQA(n_intents=3, n_attributes=0, horizon=2)


def test_trajectory_logprob_uniform_three_actions():
    env = _det_env()
    task = TaskInstance("t", 0, 1, 2)
    traj = Trajectory((Step(0, 0.0, env.ack, 0.0), Step(2, 0.0, env.ack, 0.0)))
    p = PolicyParams.tabular([], 3)
    assert trajectory_logprob(p, env, task, traj) == pytest.approx(2 * math.log(1 / 3), abs=1e-15)


def test_observation_decomposition():
    env = HiddenIntentQA(n_intents=4, n_attributes=2, n_values=2, horizon=3, user_noise=0.3)
    task = TaskInstance("t", 0, 3, 3)
    rng = np.random.default_rng(2)
    fm = LinearFeatures(1, env.action_count, env.observation_count)
    p = PolicyParams.linear(fm, env.action_count, rng.normal(size=fm.dim * env.action_count))
    for et in env.enumerate_trajectories(task)[:20]:
        t = et.trajectory
        diff = trajectory_logprob(p, env, task, t, True) - trajectory_logprob(p, env, task, t, False)
        assert diff == pytest.approx(t.observation_logprob(), abs=1e-12)


@pytest.mark.parametrize("noise", [0.0, 0.25])
def test_trajectory_probabilities_sum_to_one(noise):
    env = HiddenIntentQA(n_intents=4, n_attributes=2, n_values=2, horizon=3, user_noise=noise)
    task = TaskInstance("t", 0, 2, 3)
    rng = np.random.default_rng(9)
    fm = LinearFeatures(1, env.action_count, env.observation_count)
    p = PolicyParams.linear(fm, env.action_count, rng.normal(size=fm.dim * env.action_count))
    total = math.fsum(math.exp(trajectory_logprob(p, env, task, et.trajectory)) for et in env.enumerate_trajectories(task))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_parameter_validation():
    with pytest.raises(ValidationError):
        PolicyParams.linear(FM, 3, np.zeros(5))
    with pytest.raises(ValidationError):
        PolicyParams.tabular([(0, ())], 2, [0.0, float("inf")])


@pytest.mark.parametrize("family", ["linear", "tabular"])
def test_checkpoint_round_trip(tmp_path, family):
    rng = np.random.default_rng(0)
    if family == "linear":
        p = random_linear(rng)
    else:
        p = PolicyParams.tabular([(0, ()), (0, ((1, 0),))], 3, rng.normal(size=6))
    save_policy(p, tmp_path / "p.json")
    assert load_policy(tmp_path / "p.json") == p

import numpy as np
import pytest

from refit.core import Dataset, LoggedExample, Step, TaskInstance, Trajectory
from refit.env import reference_instance
from refit.policy import PolicyParams
from refit.reward import RewardSpec


@pytest.fixture
def env():
    return reference_instance()


@pytest.fixture
def spec():
    return RewardSpec()


@pytest.fixture
def tasks(env):
    return [TaskInstance(f"t{g}", 0, g, env.horizon) for g in range(env.n_intents)]


@pytest.fixture
def uniform(env, tasks):
    return PolicyParams.tabular(env.reachable_states(tasks), env.action_count)


def random_like(params, rng, scale=1.0):
    return params.with_values(rng.normal(scale=scale, size=params.values.size))


def toy_dataset(n_tasks=2, m=3, seed=0):
    """Small hand-built dataset with distinct rewards per rollout."""
    rng = np.random.default_rng(seed)
    examples = []
    for k in range(n_tasks):
        task = TaskInstance(f"task-{k}", 0, k % 3, 2)
        for i in range(m):
            steps = tuple(
                Step(int(rng.integers(5)), float(np.log(0.2)), int(rng.integers(2)), 0.0) for _ in range(2)
            )
            examples.append(LoggedExample(task, Trajectory(steps), float(rng.random()), seed=i))
    return Dataset(tuple(examples))


# --- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary, with whatever they stored in ``record_property("detail", ...)``.

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    line = f"criterion {number:>2} [{status}] {title}" + (f": {detail}" if detail else "")
    _criteria[number] = line


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(_criteria[number])

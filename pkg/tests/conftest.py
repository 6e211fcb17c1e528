import numpy as np
import pytest

from crlhf.core import FeatureTable, Policy, PreferenceDataset, ProblemSpec
from crlhf.synthetic import SyntheticConfig, generate_instance

ACCEPTANCE_LINES = []


def record(criterion: int, name: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {criterion} {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f" | {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_table(rng, X=3, A=4, d=3):
    f = rng.standard_normal((X, A, d))
    f /= np.linalg.norm(f, axis=2, keepdims=True)
    f *= rng.uniform(0.3, 1.0, size=(X, A, 1))
    return FeatureTable(f)


def random_policy(rng, X, A, floor=0.0):
    p = rng.dirichlet(np.ones(A), size=X) + floor
    return Policy(p / p.sum(axis=1, keepdims=True))


def random_theta(rng, d, norm=1.0):
    t = rng.standard_normal(d)
    return norm * t / np.linalg.norm(t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_instance():
    return generate_instance(SyntheticConfig(seed=3, num_prompts=6, num_actions=4, dim=3, eta0=1.0))


@pytest.fixture
def tiny_dataset():
    return PreferenceDataset([0, 1, 1], [0, 1, 0], [1, 0, 1], [[1, 0], [0, 0], [1, 1]])

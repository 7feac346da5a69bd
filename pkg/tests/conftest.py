import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bnopt.bench import bn2d_space, cnn_mock_space
from bnopt.space import BranchVar, NestedVar, QuantVar, SearchSpace

settings.register_profile(
    "default", max_examples=60, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criteria():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion for the terminal summary."""

    def record(number, ok, detail):
        _CRITERIA.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def bn2d():
    return bn2d_space()


@pytest.fixture
def cnn():
    return cnn_mock_space()


@pytest.fixture
def mixed_space():
    """Two branches, qualitative and quantitative nested slots, a log-scaled variable."""
    return SearchSpace(
        quant=[QuantVar("lr", 1e-4, 1.0, "log10"), QuantVar("width", 0.0, 10.0)],
        branch=[BranchVar("opt", ("sgd", "adam")), BranchVar("act", ("relu", "tanh", "gelu"))],
        nested=[
            NestedVar("momentum", "opt", "sgd", lower=0.0, upper=0.99),
            NestedVar("nesterov", "opt", "sgd", levels=(False, True)),
            NestedVar("beta1", "opt", "adam", lower=0.8, upper=0.999),
            NestedVar("slope", "act", "gelu", levels=("a", "b", "c")),
        ],
    )


def random_dataset(space, n, rng, fn=None):
    from bnopt.gp import Dataset
    from bnopt.space import sample_uniform

    cfgs = [sample_uniform(space, rng) for _ in range(n)]
    pts = space.encode_many(cfgs)
    y = rng.normal(size=n) if fn is None else np.array([fn(c) for c in cfgs])
    return cfgs, Dataset(pts, y)

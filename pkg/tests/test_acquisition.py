import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from bnopt import acquisition
from bnopt.acquisition import (
    AcqOptions,
    Proposal,
    expected_improvement,
    maximize_ei,
    propose,
    propose_batch,
)
from bnopt.bench import bn2d_space, eval_bn2d
from bnopt.gp import Dataset, FitOptions, build_gp, fit, posterior
from bnopt.kernel import KernelParams
from bnopt.space import Configuration, QuantVar, SearchSpace, sample_initial_design, validate


def test_ei_at_incumbent():
    assert expected_improvement(2.0, 1.0, 2.0) == pytest.approx(norm.pdf(0.0), abs=1e-12)
    assert expected_improvement(2.0, 1.0, 2.0) == pytest.approx(0.398942, abs=1e-6)


def test_ei_one_sd_above():
    assert expected_improvement(1.0, 1.0, 0.0) == pytest.approx(norm.pdf(1.0) + norm.cdf(1.0), abs=1e-12)
    assert expected_improvement(1.0, 1.0, 0.0) == pytest.approx(1.083316, abs=1e-6)


def test_ei_zero_variance():
    assert expected_improvement(-1.0, 0.0, 0.0) == 0.0
    assert expected_improvement(0.5, 0.0, 0.0) == 0.5


def test_ei_rejects_negative_variance():
    with pytest.raises(ValueError):
        expected_improvement(0.0, -1.0, 0.0)


def test_ei_vectorized():
    out = expected_improvement(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.0)
    np.testing.assert_allclose(out, [norm.pdf(0), 1.0])


def test_ei_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for mean, s in [(0.3, 0.5), (-1.0, 2.0), (1.5, 0.1)]:
        draws = np.maximum(rng.normal(mean, s, 400_000), 0.0)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(expected_improvement(mean, s * s, 0.0) - draws.mean()) <= 3 * se


def test_ei_monotone_on_grids():
    means = np.linspace(-3, 3, 61)
    variances = np.linspace(0, 4, 41)
    M, V = np.meshgrid(means, variances, indexing="ij")
    ei = expected_improvement(M, V, 0.0)
    assert ei.min() >= 0
    assert np.all(np.diff(ei, axis=0) >= -1e-12)
    below = means <= 0
    assert np.all(np.diff(ei[below], axis=1) >= -1e-12)


@given(st.floats(-50, 50), st.floats(0, 100), st.floats(-50, 50))
def test_ei_nonnegative(mean, var, y_max):
    assert expected_improvement(mean, var, y_max) >= 0


@pytest.mark.parametrize(
    "kwargs", [dict(epsilon=1.5), dict(n_raw=0), dict(batch_size=0), dict(fantasy="x"), dict(y_max_mode="x")]
)
def test_options_invariants(kwargs):
    with pytest.raises(ValueError):
        AcqOptions(**kwargs)


@pytest.fixture(scope="module")
def bn2d_gp():
    space = bn2d_space()
    cfgs = sample_initial_design(space, 20, rng_seed=1)
    y = [eval_bn2d(c.quant["x1"], c.quant["x2"], c.branch["z"], c.nested["v"]) for c in cfgs]
    ds = Dataset.from_configs(space, cfgs, y)
    return space, fit(ds, space, FitOptions(restarts=2, nu=0.5), rng_seed=0)


def test_dominant_combo_is_proposed():
    space = bn2d_space()
    cfgs = sample_initial_design(space, 40, rng_seed=3)
    y = [5.0 + 0.1 * c.quant["x1"] if (c.branch["z"], c.nested["v"]) == (2, 1) else 0.0 for c in cfgs]
    ds = Dataset.from_configs(space, cfgs, y)
    gp = build_gp(ds, space, KernelParams([1.0, 1.0], [3.0], [1.0, 1.0], 2.5), 0.0, FitOptions(nugget=1e-8))
    grid = np.linspace(0.0, 1.0, 41)
    W = np.array(np.meshgrid(grid, grid)).reshape(2, -1).T
    best = {}
    y_max = max(y)
    for combo in space.combos:
        enc = acquisition._ComboEncoder(space, combo)
        best[combo.key()] = expected_improvement(*posterior(gp, enc.encode(W)), y_max).max()
    top = max(best, key=best.get)
    prop = maximize_ei(gp, space, y_max, AcqOptions(n_raw=64), rng_seed=0)
    assert space.combos[space.combo_of(prop.config)].key() == top
    assert (prop.config.branch["z"], prop.config.nested["v"]) == (2, 1)


def test_single_observation():
    space = SearchSpace(quant=[QuantVar("x", 0.0, 1.0)])
    cfg = Configuration({"x": 0.3})
    ds = Dataset.from_configs(space, [cfg], [1.0])
    gp = build_gp(ds, space, KernelParams([5.0], [], [], 2.5), 0.0, FitOptions(nugget=0.0))
    # the profile variance of one residual is zero; supply the prior scale
    gp = replace(gp, sigma2_hat=1.0)
    at_point = expected_improvement(*posterior(gp, space.encode(cfg)), 1.0)
    assert at_point == pytest.approx(0.0, abs=1e-12)
    prop = maximize_ei(gp, space, 1.0, AcqOptions(n_raw=32), rng_seed=0)
    assert prop.acq_value > 0
    assert prop.config.quant["x"] != 0.3


def test_maximize_deterministic(bn2d_gp):
    space, gp = bn2d_gp
    a = maximize_ei(gp, space, 5.0, AcqOptions(n_raw=64), rng_seed=4)
    b = maximize_ei(gp, space, 5.0, AcqOptions(n_raw=64), rng_seed=4)
    assert a == b
    assert validate(space, a.config) == []


def test_epsilon_zero_always_maximizes(bn2d_gp):
    space, gp = bn2d_gp
    opts = AcqOptions(epsilon=0.0, n_raw=16, n_refine=1)
    assert all(propose(gp, space, opts=opts, rng_seed=s).source == "ei" for s in range(10))


def test_epsilon_one_uniform_over_combos(bn2d_gp):
    space, gp = bn2d_gp
    opts = AcqOptions(epsilon=1.0)
    n = 5000
    counts = Counter(space.combo_of(propose(gp, space, opts=opts, rng_seed=s).config) for s in range(n))
    L = len(space.combos)
    sd = math.sqrt(n * (1 / L) * (1 - 1 / L))
    assert all(abs(counts[i] - n / L) <= 3 * sd for i in range(L))


def test_epsilon_fraction(bn2d_gp, monkeypatch):
    space, gp = bn2d_gp
    stub = Proposal(Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1}), 0.0, "ei")
    monkeypatch.setattr(acquisition, "maximize_ei", lambda *a, **k: stub)
    sources = [propose(gp, space, opts=AcqOptions(epsilon=0.1), rng_seed=s).source for s in range(10000)]
    frac = sources.count("epsilon_random") / len(sources)
    assert 0.09 <= frac <= 0.11


def test_batch_of_one_equals_propose(bn2d_gp):
    space, gp = bn2d_gp
    opts = AcqOptions(n_raw=32)
    for seed in (0, 1, 2):
        assert propose_batch(gp, space, opts=opts, rng_seed=seed) == [propose(gp, space, opts=opts, rng_seed=seed)]


@pytest.mark.parametrize("fantasy", ["believer", "constant_liar_max"])
def test_batch_distinct_and_valid(bn2d_gp, fantasy):
    space, gp = bn2d_gp
    before = (gp.chol.copy(), len(gp.dataset))
    batch = propose_batch(gp, space, opts=AcqOptions(n_raw=32, batch_size=5, fantasy=fantasy), rng_seed=9)
    assert len(batch) == 5
    assert len({p.config.key() for p in batch}) == 5
    assert all(validate(space, p.config) == [] for p in batch)
    assert np.array_equal(gp.chol, before[0]) and len(gp.dataset) == before[1]


def test_believer_kills_ei_at_fantasy_point():
    space = SearchSpace(quant=[QuantVar("x", 0.0, 1.0)])
    cfgs = [Configuration({"x": v}) for v in (0.0, 0.5, 1.0)]
    ds = Dataset.from_configs(space, cfgs, [0.0, 1.0, 0.2])
    gp = build_gp(ds, space, KernelParams([3.0], [], [], 2.5), 0.0, FitOptions(nugget=1e-10))
    first = maximize_ei(gp, space, 1.0, AcqOptions(n_raw=32), rng_seed=0)
    x = space.encode(first.config)
    cond = gp.condition_on(x, posterior(gp, x)[0])
    assert first.acq_value > 1e-4
    assert expected_improvement(*posterior(cond, x), 1.0) <= 1e-6

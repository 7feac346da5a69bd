import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnopt.bench import bn2d_space
from bnopt.gp import (
    Dataset,
    FactorizationError,
    FitOptions,
    build_gp,
    fit,
    posterior,
    posterior_mean,
    profile_estimates,
)
from bnopt.kernel import KernelParams, check_validity, gram_matrix
from bnopt.space import Configuration, EncodedPoint, QuantVar, SearchSpace, sample_uniform

from oracles import dense_gls, dense_matrix, dense_posterior, random_params
from conftest import random_dataset


def test_constant_response():
    space = bn2d_space()
    rng = np.random.default_rng(0)
    _, ds = random_dataset(space, 8, rng, fn=lambda c: 3.25)
    est = profile_estimates(ds, KernelParams([1.0, 1.0], [1.0], [0.5, 0.5]), space)
    assert est.beta_hat == pytest.approx(3.25, abs=1e-9)
    assert est.sigma2_hat <= 1e-6


def test_hand_dataset_matches_dense_gls():
    space = SearchSpace(quant=[QuantVar("x", 0.0, 1.0)])
    pts = space.encode_many([Configuration({"x": v}) for v in (0.1, 0.4, 0.9)])
    y = np.array([1.0, 2.0, 0.5])
    params = KernelParams([2.0], [], [], 0.5)
    est = profile_estimates(ds := Dataset(pts, y), params, space, nugget=0.0)
    K = np.exp(-2.0 * np.abs(np.subtract.outer([0.1, 0.4, 0.9], [0.1, 0.4, 0.9])))
    beta, sigma2, nll, _ = dense_gls(K, y)
    assert est.beta_hat == pytest.approx(beta, rel=1e-12)
    assert est.sigma2_hat == pytest.approx(sigma2, rel=1e-12)
    assert est.neg_log_likelihood == pytest.approx(nll, rel=1e-12)
    assert len(ds) == 3


@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.floats(0.0, 0.5))
def test_random_datasets_match_dense_oracle(seed, n, noise):
    space = bn2d_space()
    rng = np.random.default_rng(seed)
    _, ds = random_dataset(space, n, rng)
    params = random_params(space, rng, nu=[0.5, 1.5, 2.5][seed % 3])
    opts = FitOptions(nugget=1e-6)
    gp = build_gp(ds, space, params, noise, opts)
    K = dense_matrix(ds.points, ds.points, params, space) + (1e-6 + noise) * np.eye(n)
    beta, sigma2, nll, _ = dense_gls(K, ds.y)
    assert gp.beta_hat == pytest.approx(beta, rel=1e-10, abs=1e-12)
    assert gp.sigma2_hat == pytest.approx(sigma2, rel=1e-10, abs=1e-14)
    assert gp.neg_log_likelihood == pytest.approx(nll, rel=1e-10, abs=1e-10)
    _, query = random_dataset(space, 5, rng)
    Kx = dense_matrix(query.points, ds.points, params, space)
    mean, var, blup = dense_posterior(K, Kx, np.ones(5), ds.y, beta, sigma2)
    m, v = posterior(gp, query.points, return_raw=True)
    np.testing.assert_allclose(m, mean, rtol=1e-10, atol=1e-10 * (1 + abs(beta)))
    np.testing.assert_allclose(v, var, rtol=1e-10, atol=1e-10 * sigma2)
    np.testing.assert_allclose(posterior_mean(gp, query.points), m, rtol=1e-13, atol=1e-13)
    gp_blup = build_gp(ds, space, params, noise, FitOptions(nugget=1e-6, variance_form="blup"))
    np.testing.assert_allclose(posterior(gp_blup, query.points, return_raw=True)[1], blup,
                               rtol=1e-10, atol=1e-10 * sigma2)


def test_cholesky_reconstructs_gram():
    space = bn2d_space()
    rng = np.random.default_rng(3)
    _, ds = random_dataset(space, 20, rng)
    params = random_params(space, rng)
    gp = build_gp(ds, space, params, 0.01)
    K = gram_matrix(ds.points, params, space, gp.jitter)
    assert np.linalg.norm(gp.chol @ gp.chol.T - K) <= 1e-8 * np.linalg.norm(K)


def test_duplicates_with_nugget_are_finite():
    space = bn2d_space()
    cfg = Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1})
    ds = Dataset.from_configs(space, [cfg, cfg, cfg], [1.0, 1.0, 1.0])
    est = profile_estimates(ds, KernelParams([1, 1], [1], [0.5, 0.5]), space, nugget=1e-6)
    assert math.isfinite(est.neg_log_likelihood)


def test_singular_matrix_reports_nugget():
    space = bn2d_space()
    cfg = Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1})
    ds = Dataset.from_configs(space, [cfg, cfg], [1.0, 2.0])
    with pytest.raises(FactorizationError) as info:
        profile_estimates(ds, KernelParams([1, 1], [1], [0.5, 0.5]), space, nugget=0.0)
    assert info.value.nugget == 0.0


def test_dataset_length_mismatch():
    space = bn2d_space()
    with pytest.raises(ValueError):
        Dataset(space.encode_many([Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1})]), [1.0, 2.0])


@pytest.mark.parametrize(
    "kwargs",
    [dict(theta_bounds=(1.0, 0.5)), dict(restarts=0), dict(sigma2_mode="x"), dict(variance_form="x"),
     dict(nugget=-1.0), dict(gamma_bounds=(0.0, 1.0))],
)
def test_fit_options_invariants(kwargs):
    with pytest.raises(ValueError):
        FitOptions(**kwargs)


def test_fit_options_roundtrip():
    opts = FitOptions(restarts=4, nu=1.5, theta_bounds=(0.1, 10.0))
    assert FitOptions.from_dict(opts.to_dict()) == opts


def _draw_from_kernel(space, params, n, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    cfgs = [sample_uniform(space, rng) for _ in range(n)]
    pts = space.encode_many(cfgs)
    K = gram_matrix(pts, params, space, 1e-10 + noise)
    return Dataset(pts, 2.0 + np.linalg.cholesky(K) @ rng.standard_normal(n))


def test_fit_beats_true_parameters():
    space = bn2d_space()
    truth = KernelParams([3.0, 1.0], [1.0], [0.3, 0.6], 2.5)
    ds = _draw_from_kernel(space, truth, 40, seed=1, noise=1e-4)
    opts = FitOptions(restarts=4)
    gp = fit(ds, space, opts, rng_seed=0)
    at_truth = profile_estimates(ds, truth, space, noise_ratio=1e-4, nugget=opts.nugget)
    assert gp.neg_log_likelihood <= at_truth.neg_log_likelihood + 1e-9


def test_fit_deterministic(mixed_space):
    ds = _draw_from_kernel(mixed_space, random_params(mixed_space, np.random.default_rng(0)), 25, seed=2)
    a = fit(ds, mixed_space, FitOptions(restarts=2), rng_seed=11)
    b = fit(ds, mixed_space, FitOptions(restarts=2), rng_seed=11)
    assert a.params == b.params
    assert a.noise_ratio == b.noise_ratio
    assert a.neg_log_likelihood == b.neg_log_likelihood


def test_fit_not_worse_than_warm_start():
    space = bn2d_space()
    ds = _draw_from_kernel(space, KernelParams([2.0, 2.0], [0.5], [0.2, 0.2]), 20, seed=4, noise=1e-3)
    warm = (KernelParams([1.0, 1.0], [1.0], [0.5, 0.5]), 0.01)
    gp = fit(ds, space, FitOptions(restarts=1), rng_seed=0, warm_start=warm)
    start = profile_estimates(ds, *warm[:1], space, noise_ratio=warm[1])
    assert gp.neg_log_likelihood <= start.neg_log_likelihood


@given(st.integers(0, 2**32 - 1))
def test_fitted_params_are_valid(seed):
    from bnopt.bench import cnn_mock_space

    space = cnn_mock_space()
    rng = np.random.default_rng(seed)
    _, ds = random_dataset(space, 12, rng)
    gp = fit(ds, space, FitOptions(restarts=1, search_tol=0.05, widening=bool(seed % 2)), rng_seed=seed)
    assert check_validity(gp.params, space) == []


def test_fit_needs_two_points():
    space = bn2d_space()
    ds = Dataset.from_configs(space, [Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1})], [1.0])
    with pytest.raises(ValueError):
        fit(ds, space)


def test_theta_recovery_exponential_kernel():
    # 30 correlation lengths: on short domains the exponential-kernel scale is not identifiable
    upper = 30.0
    space = SearchSpace(quant=[QuantVar("x", 0.0, upper)])
    theta_unit = 1.0 * upper
    hits = 0
    for rep in range(50):
        rng = np.random.default_rng(rep)
        pts = space.encode_many([Configuration({"x": v}) for v in rng.uniform(0, upper, 30)])
        K = gram_matrix(pts, KernelParams([theta_unit], [], [], 0.5), space, 1e-10)
        y = np.linalg.cholesky(K) @ rng.standard_normal(30)
        gp = fit(Dataset(pts, y), space, FitOptions(nu=0.5, learn_noise=False, restarts=3), rng_seed=rep)
        hits += 0.5 <= gp.params.theta[0] / theta_unit <= 2.0
    assert hits >= 40


@given(st.integers(0, 2**32 - 1))
def test_interpolation_without_noise(seed):
    space = bn2d_space()
    rng = np.random.default_rng(seed)
    _, ds = random_dataset(space, 10, rng)
    gp = fit(ds, space, FitOptions(restarts=3, learn_noise=False, nugget=1e-10), seed)
    mean, var = posterior(gp, ds.points)
    np.testing.assert_allclose(mean, ds.y, atol=1e-6 * (1 + np.abs(ds.y).max()))
    assert var.max() <= 1e-6


def test_prior_reversion_far_away():
    space = SearchSpace(quant=[QuantVar("x", 0.0, 1.0)])
    pts = space.encode_many([Configuration({"x": v}) for v in (0.0, 0.1, 0.2)])
    gp = build_gp(Dataset(pts, [1.0, 3.0, 2.0]), space, KernelParams([1e4], [], [], 0.5), 0.0,
                  FitOptions(nugget=0.0))
    mean, var = posterior(gp, space.encode(Configuration({"x": 0.9})))
    assert mean == pytest.approx(gp.beta_hat, abs=1e-12)
    assert var == pytest.approx(gp.sigma2_hat, rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_variance_bounds(seed):
    space = bn2d_space()
    rng = np.random.default_rng(seed)
    _, ds = random_dataset(space, 8, rng)
    params = random_params(space, rng)
    simple = build_gp(ds, space, params, 0.0, FitOptions(nugget=1e-8))
    blup = build_gp(ds, space, params, 0.0, FitOptions(nugget=1e-8, variance_form="blup"))
    _, q = random_dataset(space, 20, rng)
    _, v_simple = posterior(simple, q.points, return_raw=True)
    _, v_blup = posterior(blup, q.points, return_raw=True)
    tol = 1e-8 * simple.sigma2_hat
    assert v_simple.min() >= -tol
    assert v_simple.max() <= simple.sigma2_hat + tol
    assert np.all(v_blup >= v_simple - tol)


def test_conservative_sigma2_scales_by_n():
    space = bn2d_space()
    _, ds = random_dataset(space, 7, np.random.default_rng(1))
    params = KernelParams([1, 1], [1], [0.5, 0.5])
    mle = profile_estimates(ds, params, space).sigma2_hat
    cons = profile_estimates(ds, params, space, sigma2_mode="conservative").sigma2_hat
    assert cons == pytest.approx(7 * mle)


def test_condition_on_matches_dense_update():
    space = bn2d_space()
    rng = np.random.default_rng(5)
    _, ds = random_dataset(space, 6, rng)
    params = random_params(space, rng)
    gp = build_gp(ds, space, params, 0.0, FitOptions(nugget=1e-8))
    new = space.encode(sample_uniform(space, rng))
    cond = gp.condition_on(new, 0.7)
    assert len(gp.dataset) == 6 and len(cond.dataset) == 7
    pts = cond.dataset.points
    K = dense_matrix(pts, pts, params, space) + 1e-8 * np.eye(7)
    _, q = random_dataset(space, 4, rng)
    Kx = dense_matrix(q.points, pts, params, space)
    mean, var, _ = dense_posterior(K, Kx, np.ones(4), cond.dataset.y, gp.beta_hat, gp.sigma2_hat)
    m, v = posterior(cond, q.points, return_raw=True)
    np.testing.assert_allclose(m, mean, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(v, var, rtol=1e-8, atol=1e-10)
    assert cond.beta_hat == gp.beta_hat and cond.sigma2_hat == gp.sigma2_hat


def test_scalar_posterior_for_single_point():
    space = bn2d_space()
    _, ds = random_dataset(space, 5, np.random.default_rng(2))
    gp = build_gp(ds, space, KernelParams([1, 1], [1], [0.5, 0.5]))
    m, v = posterior(gp, space.encode(Configuration({"x1": 0.0, "x2": 0.0}, {"z": 1}, {"v": 1})))
    assert isinstance(m, float) and isinstance(v, float)


def test_posterior_point_roundtrip_types():
    space = bn2d_space()
    _, ds = random_dataset(space, 5, np.random.default_rng(2))
    gp = build_gp(ds, space, KernelParams([1, 1], [1], [0.5, 0.5]))
    pts = EncodedPoint(ds.points.w[:2], ds.points.z[:2], ds.points.v[:2])
    mean, var = posterior(gp, pts)
    assert mean.shape == (2,) and var.shape == (2,)

"""Constant-mean Gaussian process with profile-likelihood fitting.

With correlation matrix ``K = R + (nugget + tau) I`` the generalized
least squares estimates are::

    beta   = (1' K^-1 y) / (1' K^-1 1)
    sigma2 = (y - beta)' K^-1 (y - beta) / n

and the correlation parameters maximize ``-(n/2) log sigma2 - (1/2) log|K|``.
``tau`` is the noise variance relative to ``sigma2``; it is learned when
``FitOptions.learn_noise`` is set and fixed at zero otherwise.

Kernel parameters are searched inside their boxes intersected with the
validity region (``kernel.phi_caps``), so every fitted model carries a
positive definite kernel.  The search is derivative free: analytic
likelihood gradients are not implemented.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular

from . import _optim
from .kernel import DEFAULT_NUGGET, KernelParams, check_validity, cross_correlation, gram_matrix, phi_caps
from .space import EncodedPoint, SearchSpace

__all__ = [
    "FactorizationError",
    "FitError",
    "Dataset",
    "FitOptions",
    "TrainedGP",
    "ProfileEstimates",
    "profile_estimates",
    "fit",
    "posterior",
    "posterior_mean",
]


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, nugget: float, detail: str = ""):
        super().__init__(f"correlation matrix not factorizable at nugget={nugget:g}{detail}")
        self.nugget = nugget


class FitError(RuntimeError):
    """Every likelihood start failed to factorize."""


@dataclass(frozen=True)
class Dataset:
    points: EncodedPoint
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        object.__setattr__(self, "y", y)
        if self.points.w.shape[0] != y.size:
            raise ValueError(f"{self.points.w.shape[0]} points but {y.size} responses")

    @classmethod
    def from_configs(cls, space: SearchSpace, configs, y) -> "Dataset":
        return cls(space.encode_many(list(configs)), y)

    def __len__(self):
        return self.y.size


@dataclass(frozen=True)
class FitOptions:
    theta_bounds: tuple = (1e-3, 1e3)
    gamma_bounds: tuple = (1e-3, 10.0)
    phi_bounds: tuple = (1e-3, 10.0)
    # noise variance as a multiple of sigma2
    noise_bounds: tuple = (1e-10, 10.0)
    restarts: int = 10
    learn_noise: bool = True
    sigma2_mode: str = "mle"
    variance_form: str = "simple"
    nu: float = 2.5
    nugget: float = DEFAULT_NUGGET
    widening: bool = False
    search_tol: float = 1e-3

    def __post_init__(self):
        for name in ("theta_bounds", "gamma_bounds", "phi_bounds", "noise_bounds"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi and math.isfinite(hi)):
                raise ValueError(f"{name} must satisfy 0 < low < high < inf, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.sigma2_mode not in ("mle", "conservative"):
            raise ValueError(f"sigma2_mode must be 'mle' or 'conservative', got {self.sigma2_mode!r}")
        if self.variance_form not in ("simple", "blup"):
            raise ValueError(f"variance_form must be 'simple' or 'blup', got {self.variance_form!r}")
        if self.nugget < 0:
            raise ValueError("nugget must be >= 0")

    def to_dict(self) -> dict:
        return {
            "theta_bounds": list(self.theta_bounds),
            "gamma_bounds": list(self.gamma_bounds),
            "phi_bounds": list(self.phi_bounds),
            "noise_bounds": list(self.noise_bounds),
            "restarts": self.restarts,
            "learn_noise": self.learn_noise,
            "sigma2_mode": self.sigma2_mode,
            "variance_form": self.variance_form,
            "nu": self.nu,
            "nugget": self.nugget,
            "widening": self.widening,
            "search_tol": self.search_tol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitOptions":
        fields = dict(data)
        for key in ("theta_bounds", "gamma_bounds", "phi_bounds", "noise_bounds"):
            if key in fields:
                fields[key] = tuple(fields[key])
        return cls(**fields)


class ProfileEstimates(NamedTuple):
    beta_hat: float
    sigma2_hat: float
    neg_log_likelihood: float


class _Factor(NamedTuple):
    chol: np.ndarray
    beta: float
    sigma2_mle: float
    nll: float
    alpha: np.ndarray
    kinv_one: np.ndarray
    one_kinv_one: float


def _factorize(K: np.ndarray, y: np.ndarray, nugget: float) -> _Factor:
    L, info = lapack.dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise FactorizationError(nugget, f" (LAPACK info={info})")
    diag = np.diag(L)
    if not np.all(np.isfinite(diag)) or diag.min() <= 0:
        raise FactorizationError(nugget, " (non-positive pivot)")
    rhs = np.empty((y.size, 2))
    rhs[:, 0] = y
    rhs[:, 1] = 1.0
    sol, _ = lapack.dpotrs(L, rhs, lower=1)
    kinv_y, kinv_one = sol[:, 0], sol[:, 1]
    one_kinv_one = float(kinv_one.sum())
    beta = float(kinv_y.sum()) / one_kinv_one
    alpha = kinv_y - beta * kinv_one
    resid = y - beta
    sigma2 = max(float(resid @ alpha) / y.size, 0.0)
    nll = 0.5 * y.size * math.log(max(sigma2, 1e-300)) + float(np.sum(np.log(diag)))
    return _Factor(L, beta, sigma2, nll, alpha, kinv_one, one_kinv_one)


def _scale_sigma2(sigma2_mle: float, n: int, mode: str) -> float:
    return sigma2_mle * n if mode == "conservative" else sigma2_mle


def profile_estimates(
    dataset: Dataset,
    params: KernelParams,
    space: SearchSpace,
    noise_ratio: float = 0.0,
    nugget: float = DEFAULT_NUGGET,
    sigma2_mode: str = "mle",
) -> ProfileEstimates:
    """GLS estimates of the mean and variance plus the negated profile log-likelihood.

    Raises ``FactorizationError`` when ``R + (nugget + noise_ratio) I`` is not
    numerically positive definite.
    """
    K = gram_matrix(dataset.points, params, space, nugget + noise_ratio)
    fac = _factorize(K, dataset.y, nugget)
    return ProfileEstimates(fac.beta, _scale_sigma2(fac.sigma2_mle, len(dataset), sigma2_mode), fac.nll)


@dataclass(frozen=True, eq=False)
class TrainedGP:
    space: SearchSpace
    dataset: Dataset
    params: KernelParams
    noise_ratio: float
    beta_hat: float
    sigma2_hat: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    kinv_one: np.ndarray = field(repr=False)
    one_kinv_one: float = field(repr=False)
    neg_log_likelihood: float
    options: FitOptions = field(default_factory=FitOptions)

    @property
    def noise_var(self) -> float:
        return self.noise_ratio * self.sigma2_hat

    @property
    def jitter(self) -> float:
        return self.options.nugget + self.noise_ratio

    def condition_on(self, point: EncodedPoint, y: float) -> "TrainedGP":
        """Append one observation without refitting hyperparameters.

        The Cholesky factor is extended by one row; ``beta_hat`` and
        ``sigma2_hat`` stay fixed.  The receiver is not modified.
        """
        X = self.dataset.points
        r = cross_correlation(point, X, self.params, self.space)[0]
        ell = solve_triangular(self.chol, r, lower=True)
        d2 = 1.0 + self.jitter - float(ell @ ell)
        diag = math.sqrt(max(d2, self.options.nugget or 1e-12))
        n = self.chol.shape[0]
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self.chol
        L[n, :n] = ell
        L[n, n] = diag
        new_points = EncodedPoint(
            np.vstack([X.w, np.atleast_2d(point.w)]),
            np.vstack([X.z, np.atleast_2d(point.z)]),
            np.vstack([X.v, np.atleast_2d(point.v)]),
        )
        ys = np.append(self.dataset.y, float(y))
        kinv_one = cho_solve((L, True), np.ones(n + 1))
        alpha = cho_solve((L, True), ys - self.beta_hat)
        return replace(
            self,
            dataset=Dataset(new_points, ys),
            chol=L,
            alpha=alpha,
            kinv_one=kinv_one,
            one_kinv_one=float(kinv_one.sum()),
        )

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "noise_ratio": self.noise_ratio,
            "beta_hat": self.beta_hat,
            "sigma2_hat": self.sigma2_hat,
            "neg_log_likelihood": self.neg_log_likelihood,
            "options": self.options.to_dict(),
        }


def build_gp(
    dataset: Dataset,
    space: SearchSpace,
    params: KernelParams,
    noise_ratio: float = 0.0,
    options: FitOptions | None = None,
) -> TrainedGP:
    """Factorize at fixed hyperparameters; used after fitting and when reloading."""
    options = options or FitOptions()
    K = gram_matrix(dataset.points, params, space, options.nugget + noise_ratio)
    fac = _factorize(K, dataset.y, options.nugget)
    return TrainedGP(
        space=space,
        dataset=dataset,
        params=params,
        noise_ratio=float(noise_ratio),
        beta_hat=fac.beta,
        sigma2_hat=_scale_sigma2(fac.sigma2_mle, len(dataset), options.sigma2_mode),
        chol=fac.chol,
        alpha=fac.alpha,
        kinv_one=fac.kinv_one,
        one_kinv_one=fac.one_kinv_one,
        neg_log_likelihood=fac.nll,
        options=options,
    )


class _Codec:
    """Map the unit box [0, 1]^P to (theta, gamma, phi, tau) on log scales."""

    def __init__(self, space: SearchSpace, opts: FitOptions):
        self.space, self.opts = space, opts
        self.d, self.q, self.m = space.d, space.q, len(space.nested)
        self.size = self.d + self.q + self.m + (1 if opts.learn_noise else 0)

    @staticmethod
    def _exp(u, lo, hi):
        return np.exp(np.log(lo) + np.asarray(u) * (np.log(hi) - np.log(lo)))

    @staticmethod
    def _log(x, lo, hi):
        span = np.log(hi) - np.log(lo)
        safe = np.where(span > 0, span, 1.0)
        u = np.where(span > 0, (np.log(x) - np.log(lo)) / safe, 0.0)
        return np.clip(u, 0.0, 1.0)

    def _phi_box(self, gamma):
        caps = phi_caps(gamma, self.space, self.opts.widening)
        lo, hi = self.opts.phi_bounds
        return np.minimum(lo, caps), np.minimum(hi, caps)

    def decode(self, u) -> tuple[KernelParams, float]:
        o = self.opts
        d, q, m = self.d, self.q, self.m
        theta = self._exp(u[:d], *o.theta_bounds)
        gamma = self._exp(u[d : d + q], *o.gamma_bounds)
        plo, phi_hi = self._phi_box(gamma)
        phi = np.exp(np.log(plo) + u[d + q : d + q + m] * (np.log(phi_hi) - np.log(plo)))
        phi = np.minimum(phi, phi_hi)
        tau = float(self._exp(u[-1], *o.noise_bounds)) if o.learn_noise else 0.0
        return KernelParams(theta, gamma, phi, o.nu), tau

    def encode(self, params: KernelParams, tau: float) -> np.ndarray:
        o = self.opts
        parts = [
            self._log(params.theta, *o.theta_bounds),
            self._log(params.gamma, *o.gamma_bounds),
        ]
        gamma = np.clip(params.gamma, *o.gamma_bounds)
        plo, phi_hi = self._phi_box(gamma)
        up = np.array(
            [self._log(params.phi[t], plo[t], phi_hi[t]) for t in range(self.m)], dtype=float
        )
        parts.append(up)
        if o.learn_noise:
            parts.append(np.atleast_1d(self._log(max(tau, o.noise_bounds[0]), *o.noise_bounds)))
        return np.concatenate(parts) if parts else np.zeros(0)


def fit(
    dataset: Dataset,
    space: SearchSpace,
    opts: FitOptions | None = None,
    rng_seed: int = 0,
    warm_start: tuple[KernelParams, float] | None = None,
) -> TrainedGP:
    """Maximum likelihood over the kernel parameters within their boxes.

    Starts are ``opts.restarts`` Latin hypercube points in log-parameter
    space, preceded by ``warm_start`` when given.  Each start is polished
    by compass search; the lowest negative log-likelihood wins, ties going
    to the earlier start.  Combos without observations are allowed; their
    predictions are then governed by the cross-level correlation.
    """
    opts = opts or FitOptions()
    if len(dataset) < 2:
        raise ValueError("fitting needs at least 2 observations")
    codec = _Codec(space, opts)
    rng = np.random.default_rng(rng_seed)
    starts = list(_optim.lhd_unit(opts.restarts, codec.size, rng))
    if warm_start is not None:
        starts.insert(0, codec.encode(*warm_start))

    y = dataset.y
    failures = 0

    def objective(u):
        nonlocal failures
        params, tau = codec.decode(u)
        K = gram_matrix(dataset.points, params, space, opts.nugget + tau)
        try:
            return _factorize(K, y, opts.nugget).nll
        except FactorizationError:
            failures += 1
            return math.inf

    best_u, best_f = None, math.inf
    for u0 in starts:
        f0 = objective(u0)
        if not math.isfinite(f0):
            continue
        u, fu, _ = _optim.pattern_search(objective, u0, tol=opts.search_tol, f0=f0)
        if fu < best_f:
            best_u, best_f = u, fu
    if best_u is None:
        raise FitError(
            f"all {len(starts)} likelihood starts failed to factorize "
            f"(n={len(dataset)}, nugget={opts.nugget:g}, failures={failures})"
        )
    params, tau = codec.decode(best_u)
    bad = check_validity(params, space)
    if bad:  # pragma: no cover - guarded by construction
        raise FitError(f"fitted parameters violate validity: {bad[0].message}")
    return build_gp(dataset, space, params, tau, opts)


def posterior(gp: TrainedGP, x: EncodedPoint, return_raw: bool = False):
    """Posterior mean and variance of the latent function at the rows of ``x``.

    Variance is ``sigma2 (1 - r' K^-1 r)``; with ``variance_form="blup"``
    the term ``sigma2 (1 - 1' K^-1 r)^2 / (1' K^-1 1)`` for the estimated
    mean is added.  Negative round-off is clamped to zero unless
    ``return_raw`` is set.
    """
    r = cross_correlation(x, gp.dataset.points, gp.params, gp.space)
    mean = gp.beta_hat + r @ gp.alpha
    v = solve_triangular(gp.chol, r.T, lower=True)
    var = gp.sigma2_hat * (1.0 - np.einsum("ij,ij->j", v, v))
    if gp.options.variance_form == "blup":
        delta = 1.0 - r @ gp.kinv_one
        var = var + gp.sigma2_hat * delta**2 / gp.one_kinv_one
    if not return_raw:
        var = np.maximum(var, 0.0)
    if np.ndim(x.w) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def posterior_mean(gp: TrainedGP, x: EncodedPoint) -> np.ndarray:
    """Posterior mean only; skips the triangular solve needed for variances."""
    r = cross_correlation(x, gp.dataset.points, gp.params, gp.space)
    return gp.beta_hat + r @ gp.alpha

"""Product kernel over quantitative, branching and nested variables.

The correlation between ``x = (w, z, v)`` and ``x' = (w', z', v')`` is::

    R(x, x') = R_theta(w, w') * R_gamma(z, z') * R_phi(v, v')

* ``R_theta`` is a product of one-dimensional Matérn profiles,
  ``prod_i M_nu(theta_i |w_i - w'_i|)``.  For ``nu = 1/2`` this equals
  ``exp(-sum_i theta_i |w_i - w'_i|)``.  This is the one place to change
  for an ARD-l2 form.
* ``R_gamma = prod_k exp(-gamma_k 1{z_k != z'_k})``.
* ``R_phi = prod_k exp(-sum_b 1{z_k = z'_k = b} sum_j phi^b_kj d(v^b_j, v'^b_j))``
  where ``d`` is ``|.|`` for quantitative and a mismatch indicator for
  qualitative nested variables.

The Gram and cross-correlation matrices are computed by a compiled
extension when it is importable, otherwise by numpy.  Set
``BNOPT_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _pykernel
from .space import EncodedPoint, SearchSpace

__all__ = [
    "KernelParams",
    "Violation",
    "BACKEND",
    "k_quant",
    "k_branch",
    "k_nested",
    "k_full",
    "check_validity",
    "gram_matrix",
    "cross_correlation",
    "phi_caps",
]

NU_CODES = {0.5: 1, 1.5: 3, 2.5: 5}
DEFAULT_NUGGET = 1e-8


def _load_backends() -> dict:
    backends = {"python": _pykernel.cross_corr}
    try:
        from . import _ckernel
    except ImportError:
        pass
    else:
        backends["cython"] = _ckernel.cross_corr
    return backends


BACKENDS = _load_backends()
BACKEND = (
    "python"
    if os.environ.get("BNOPT_PURE_PYTHON") or "cython" not in BACKENDS
    else "cython"
)


@dataclass(frozen=True, eq=False)
class KernelParams:
    theta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    nu: float = 2.5

    def __post_init__(self):
        for name in ("theta", "gamma", "phi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.nu not in NU_CODES:
            raise ValueError(f"matern nu must be one of 0.5, 1.5, 2.5; got {self.nu}")

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "gamma": self.gamma.tolist(),
            "phi": self.phi.tolist(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelParams":
        return cls(data["theta"], data["gamma"], data["phi"], data.get("nu", 2.5))

    def __eq__(self, other):
        if not isinstance(other, KernelParams):
            return NotImplemented
        return (
            self.nu == other.nu
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.gamma, other.gamma)
            and np.array_equal(self.phi, other.phi)
        )

    __hash__ = None


class Violation(NamedTuple):
    """A failed validity condition for branch ``branch``, nested ``nested``, level ``level``.

    ``nested`` is None for the joint condition over several nested
    variables sharing one level, and ``branch`` is None for shape or
    positivity problems.
    """

    branch: str | None
    nested: str | None
    level: object
    lhs: float
    rhs: float
    message: str


def k_quant(w, w2, theta, nu: float = 2.5) -> float:
    w, w2, theta = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (w, w2, theta))
    if w.shape != w2.shape or w.shape != theta.shape:
        raise ValueError(f"dimension mismatch: {w.shape}, {w2.shape}, theta {theta.shape}")
    return float(np.prod(_pykernel.matern(theta * np.abs(w - w2), NU_CODES[nu])))


def k_branch(z, z2, gamma) -> float:
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    diff = np.array([a != b for a, b in zip(z, z2)], dtype=float)
    return float(np.exp(-np.dot(gamma, diff)))


def k_nested(v, v2, z, z2, phi, space: SearchSpace) -> float:
    """Nested factor; ``z`` are branch level indices, ``v`` encoded slot values."""
    lay = space.layout
    expo = 0.0
    for t in range(len(space.nested)):
        k, b = lay.parent[t], lay.level[t]
        if z[k] == b and z2[k] == b:
            dist = float(v[t] != v2[t]) if lay.qualitative[t] else abs(v[t] - v2[t])
            expo += phi[t] * dist
    return math.exp(-expo)


def k_full(x: EncodedPoint, x2: EncodedPoint, params: KernelParams, space: SearchSpace) -> float:
    return (
        k_quant(x.w, x2.w, params.theta, params.nu)
        * k_branch(x.z, x2.z, params.gamma)
        * k_nested(x.v, x2.v, x.z, x2.z, params.phi, space)
    )


def _as_batch(x: EncodedPoint) -> EncodedPoint:
    if np.ndim(x.w) == 2:
        return x
    return EncodedPoint(np.atleast_2d(x.w), np.atleast_2d(x.z), np.atleast_2d(x.v))


def prepare(x: EncodedPoint, space: SearchSpace) -> tuple:
    """Contiguous (w, z, v) arrays in the dtypes the backends expect."""
    x = _as_batch(x)
    n = x.w.shape[0]

    def c(arr, dtype, ncols):
        return np.ascontiguousarray(np.asarray(arr, dtype=dtype).reshape(n, ncols))

    return (
        c(x.w, np.float64, space.d),
        c(x.z, np.int64, space.q),
        c(x.v, np.float64, len(space.nested)),
    )


def correlation_prepared(a: tuple, b: tuple, params: KernelParams, space: SearchSpace,
                         symmetric: bool = False, backend: str | None = None) -> np.ndarray:
    lay = space.layout
    return BACKENDS[backend or BACKEND](
        *a, *b,
        np.ascontiguousarray(params.theta), np.ascontiguousarray(params.gamma),
        np.ascontiguousarray(params.phi),
        lay.parent, lay.level, lay.qualitative,
        NU_CODES[params.nu], symmetric,
    )


def cross_correlation(
    a: EncodedPoint,
    b: EncodedPoint,
    params: KernelParams,
    space: SearchSpace,
    backend: str | None = None,
) -> np.ndarray:
    """Correlation matrix between the rows of ``a`` and the rows of ``b``."""
    return correlation_prepared(prepare(a, space), prepare(b, space), params, space,
                                backend=backend)


def gram_matrix(
    points: EncodedPoint,
    params: KernelParams,
    space: SearchSpace,
    nugget: float = DEFAULT_NUGGET,
    backend: str | None = None,
) -> np.ndarray:
    if nugget < 0:
        raise ValueError("nugget must be >= 0")
    prep = prepare(points, space)
    K = correlation_prepared(prep, prep, params, space, symmetric=True, backend=backend)
    K[np.diag_indices_from(K)] += nugget
    return K


def _slot_factor(phi: float, g: int) -> float:
    """Lower bound of the within-level correlation mean for one nested slot."""
    e = math.exp(-phi)
    return e + (1.0 - e) / g if g else e


def _level_groups(space: SearchSpace) -> dict[tuple[int, int], list[int]]:
    lay = space.layout
    groups: dict[tuple[int, int], list[int]] = {}
    for t in range(len(space.nested)):
        groups.setdefault((int(lay.parent[t]), int(lay.level[t])), []).append(t)
    return groups


def check_validity(params: KernelParams, space: SearchSpace, rtol: float = 1e-12) -> list[Violation]:
    """Every violated sufficient condition for positive definiteness.

    Per nested slot under branch ``k`` and level ``b`` with ``g`` levels::

        exp(-phi) + (1 - exp(-phi)) / g >= exp(-gamma_k)   (qualitative)
        phi <= gamma_k                                     (quantitative)

    When several nested slots share one level the product of their
    factors must also dominate ``exp(-gamma_k)``; with a single slot this
    adds nothing.
    """
    out: list[Violation] = []
    shapes = {"theta": space.d, "gamma": space.q, "phi": len(space.nested)}
    for name, size in shapes.items():
        arr = getattr(params, name)
        if arr.shape != (size,):
            out.append(Violation(None, None, None, float(arr.size), float(size),
                                 f"{name} has {arr.size} entries, expected {size}"))
        elif not np.all(np.isfinite(arr) & (arr > 0)):
            out.append(Violation(None, None, None, float(arr.min()), 0.0,
                                 f"{name} entries must be positive and finite"))
    if out:
        return out

    lay = space.layout
    for (k, b), slots in _level_groups(space).items():
        bound = math.exp(-params.gamma[k])
        tol = rtol * bound
        branch = space.branch[k]
        level = branch.levels[b]
        joint = 1.0
        for t in slots:
            nv = space.nested[t]
            phi = float(params.phi[t])
            if lay.qualitative[t]:
                lhs = _slot_factor(phi, int(lay.n_levels[t]))
                if lhs < bound - tol:
                    out.append(Violation(branch.name, nv.name, level, lhs, bound,
                                         f"qualitative nested {nv.name!r} under {branch.name}={level!r}: "
                                         f"{lhs:.6g} < exp(-gamma)={bound:.6g}"))
            else:
                lhs = math.exp(-phi)
                if lhs < bound - tol:
                    out.append(Violation(branch.name, nv.name, level, phi, float(params.gamma[k]),
                                         f"quantitative nested {nv.name!r} under {branch.name}={level!r}: "
                                         f"phi={phi:.6g} > gamma={params.gamma[k]:.6g}"))
            joint *= lhs
        if len(slots) > 1 and joint < bound - tol:
            out.append(Violation(branch.name, None, level, joint, bound,
                                 f"joint nested factor under {branch.name}={level!r}: "
                                 f"{joint:.6g} < exp(-gamma)={bound:.6g}"))
    return out


def phi_caps(gamma: np.ndarray, space: SearchSpace, widening: bool = False) -> np.ndarray:
    """Largest phi per nested slot that keeps ``check_validity`` satisfied.

    Each of the ``m`` slots sharing a level is capped so its own factor is
    at least ``exp(-gamma_k / m)``; the product then dominates
    ``exp(-gamma_k)``.  Without ``widening`` the cap is ``gamma_k / m`` for
    every slot (the quantitative rule applied to all), with it qualitative
    slots get the looser level-count bound, possibly infinite.
    """
    lay = space.layout
    caps = np.empty(len(space.nested))
    for (k, _), slots in _level_groups(space).items():
        share = gamma[k] / len(slots)
        for t in slots:
            caps[t] = share
            if widening and lay.qualitative[t]:
                g = int(lay.n_levels[t])
                c = math.exp(-share)
                a = (c - 1.0 / g) / (1.0 - 1.0 / g)
                caps[t] = math.inf if a <= 0 else max(-math.log(a), share)
    return caps

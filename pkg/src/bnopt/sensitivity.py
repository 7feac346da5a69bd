"""Monte Carlo main effects and two-factor interaction curves of a fitted GP.

Curves are computed on the posterior mean surface.  At every grid value
the remaining variables are averaged over a reference measure: uniform
on each quantitative variable's model scale (log10 for log variables),
uniform over branch levels, and uniform over the levels or range of each
active nested variable given its parent.  All grid points of one call
share the same underlying draws (common random numbers), so differences
between grid points carry less noise than the per-point standard errors
suggest.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .gp import TrainedGP, posterior_mean
from .space import PLACEHOLDER, EncodedPoint, SearchSpace

__all__ = [
    "SensitivityError",
    "EffectCurve",
    "MEASURE",
    "default_grid",
    "default_levels",
    "grand_mean",
    "main_effect",
    "interaction_effect",
    "curves_to_csv",
]

MEASURE = "uniform"
DEFAULT_GRID_POINTS = 21
DEFAULT_LEVELS = 5
DEFAULT_N_MC = 2000
CSV_COLUMNS = ["variable", "grid_value", "conditioning_level", "mean", "std_err", "n_mc"]


class SensitivityError(ValueError):
    """A request that has no well-defined effect on the given space."""


@dataclass(frozen=True, eq=False)
class EffectCurve:
    variable: str
    grid: list
    values: np.ndarray
    std_err: np.ndarray
    n_mc: int
    # variables held fixed for every draw, e.g. {"network": "ResNet"}
    conditioning: dict = field(default_factory=dict)
    measure: str = MEASURE

    def __post_init__(self):
        object.__setattr__(self, "grid", list(self.grid))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "std_err", np.asarray(self.std_err, dtype=float))
        if not (len(self.grid) == self.values.size == self.std_err.size):
            raise ValueError("grid, values and std_err lengths differ")

    def __eq__(self, other):
        if not isinstance(other, EffectCurve):
            return NotImplemented
        return (
            (self.variable, self.grid, self.n_mc, self.conditioning, self.measure)
            == (other.variable, other.grid, other.n_mc, other.conditioning, other.measure)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.std_err, other.std_err)
        )

    def conditioning_label(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.conditioning.items())

    def rows(self):
        label = self.conditioning_label()
        for g, m, s in zip(self.grid, self.values, self.std_err):
            yield {
                "variable": self.variable,
                "grid_value": g,
                "conditioning_level": label,
                "mean": repr(float(m)),
                "std_err": repr(float(s)),
                "n_mc": self.n_mc,
            }


def curves_to_csv(curves: Sequence[EffectCurve]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for c in curves:
        writer.writerows(c.rows())
    return buf.getvalue()


# -- variable resolution ------------------------------------------------------


@dataclass(frozen=True)
class _Target:
    kind: str  # "quant", "branch" or "nested"
    index: int  # column in w, z or v
    name: str


def _resolve(space: SearchSpace, name: str, fixed: dict, auto_parent: bool) -> _Target:
    """Locate ``name``; for nested variables pin down the active slot.

    ``fixed`` may be extended with the enabling parent level when
    ``auto_parent`` is set and the choice is unambiguous.
    """
    try:
        kind = space.kind_of(name)
    except KeyError:
        raise SensitivityError(f"unknown variable {name!r}; known: {list(space.names)}") from None
    if kind == "quant":
        return _Target("quant", [v.name for v in space.quant].index(name), name)
    if kind == "branch":
        return _Target("branch", space.branch_index(name), name)
    slots = space.nested_slots(name)
    parent = space.nested[slots[0]].parent
    if parent in fixed:
        for t in slots:
            if space.nested[t].parent_level == fixed[parent]:
                return _Target("nested", t, name)
        raise SensitivityError(
            f"nested variable {name!r} is inactive when {parent}={fixed[parent]!r}"
        )
    if auto_parent and len(slots) == 1:
        fixed[parent] = space.nested[slots[0]].parent_level
        return _Target("nested", slots[0], name)
    enabling = [space.nested[t].parent_level for t in slots]
    raise SensitivityError(
        f"nested variable {name!r} needs its parent fixed: pass {parent!r} at one of "
        f"{enabling} as a conditioning value (use the conditional form)"
    )


def _unit_value(space: SearchSpace, target: _Target, value: Any) -> float:
    """Model-scale coordinate for ``value``; raises on out-of-range input."""
    if target.kind == "quant":
        var = space.quant[target.index]
        if not var.lower <= float(value) <= var.upper:
            raise SensitivityError(f"{target.name}={value!r} outside [{var.lower}, {var.upper}]")
        return var.to_unit(float(value))
    if target.kind == "branch":
        levels = space.branch[target.index].levels
        if value not in levels:
            raise SensitivityError(f"{value!r} is not a level of {target.name!r}: {list(levels)}")
        return float(levels.index(value))
    nv = space.nested[target.index]
    if nv.qualitative:
        if value not in nv.levels:
            raise SensitivityError(f"{value!r} is not a level of {target.name!r}: {list(nv.levels)}")
        return float(nv.levels.index(value))
    if not nv.lower <= float(value) <= nv.upper:
        raise SensitivityError(f"{target.name}={value!r} outside [{nv.lower}, {nv.upper}]")
    return nv.to_unit(float(value))


def _resolve_fixed(space: SearchSpace, fixed: Mapping) -> tuple[dict, list[tuple[_Target, float]]]:
    """Resolve user conditioning; branch entries first so nested ones can find their slot."""
    fixed = dict(fixed or {})
    order = sorted(fixed, key=lambda k: 0 if k in [b.name for b in space.branch] else 1)
    resolved = []
    for name in order:
        t = _resolve(space, name, fixed, auto_parent=False)
        resolved.append((t, _unit_value(space, t, fixed[name])))
    return fixed, resolved


# -- sampling -----------------------------------------------------------------


def _base_draws(space: SearchSpace, n: int, seed: int) -> EncodedPoint:
    """Independent draws of every coordinate; activity is applied later."""
    rng = np.random.default_rng(seed)
    lay = space.layout
    w = rng.random((n, space.d))
    z = np.empty((n, space.q), dtype=np.int64)
    for k, b in enumerate(space.branch):
        z[:, k] = rng.integers(len(b.levels), size=n)
    v = np.empty((n, len(space.nested)))
    for t in range(len(space.nested)):
        v[:, t] = rng.integers(lay.n_levels[t], size=n) if lay.qualitative[t] else rng.random(n)
    return EncodedPoint(w, z, v)


def _with(base: EncodedPoint, space: SearchSpace, settings: Sequence[tuple[_Target, float]]) -> EncodedPoint:
    w, z, v = base.w.copy(), base.z.copy(), base.v.copy()
    for t, u in settings:
        col = {"quant": w, "branch": z, "nested": v}[t.kind]
        col[:, t.index] = u
    lay = space.layout
    for t in range(len(space.nested)):
        v[z[:, lay.parent[t]] != lay.level[t], t] = PLACEHOLDER
    return EncodedPoint(w, z, v)


def _estimate(gp: TrainedGP, pts: EncodedPoint) -> tuple[float, float]:
    y = posterior_mean(gp, pts)
    n = y.size
    se = float(np.std(y, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(np.mean(y)), se


# -- public API ---------------------------------------------------------------


def default_grid(space: SearchSpace, name: str, fixed: Mapping | None = None,
                 points: int = DEFAULT_GRID_POINTS) -> list:
    """Levels for categorical variables, else ``points`` values evenly spaced on the model scale."""
    fixed = dict(fixed or {})
    t = _resolve(space, name, fixed, auto_parent=True)
    if t.kind == "branch":
        return list(space.branch[t.index].levels)
    var = space.quant[t.index] if t.kind == "quant" else space.nested[t.index]
    if t.kind == "nested" and var.qualitative:
        return list(var.levels)
    return [var.from_unit(u) for u in np.linspace(0.0, 1.0, points)]


def default_levels(space: SearchSpace, name: str, fixed: Mapping | None = None,
                   count: int = DEFAULT_LEVELS) -> list:
    """Conditioning values: all levels, or ``count`` quantiles of the reference measure."""
    fixed = dict(fixed or {})
    t = _resolve(space, name, fixed, auto_parent=True)
    if t.kind == "branch":
        return list(space.branch[t.index].levels)
    var = space.quant[t.index] if t.kind == "quant" else space.nested[t.index]
    if t.kind == "nested" and var.qualitative:
        return list(var.levels)
    probs = (np.arange(count) + 0.5) / count
    return [var.from_unit(u) for u in probs]


def grand_mean(gp: TrainedGP, space: SearchSpace, n_mc: int = DEFAULT_N_MC, seed: int = 0,
               fixed: Mapping | None = None) -> tuple[float, float]:
    """Mean of the posterior mean under the reference measure, with its standard error."""
    _, settings = _resolve_fixed(space, fixed or {})
    return _estimate(gp, _with(_base_draws(space, n_mc, seed), space, settings))


def main_effect(
    gp: TrainedGP,
    space: SearchSpace,
    var: str,
    grid: Sequence | None = None,
    n_mc: int = DEFAULT_N_MC,
    seed: int = 0,
    fixed: Mapping | None = None,
) -> EffectCurve:
    """``E[mu(x) | x_var = g]`` for each ``g`` in ``grid``.

    A nested ``var`` requires its parent branch in ``fixed``.  Other entries
    of ``fixed`` hold further variables constant for every draw.
    """
    if n_mc < 2:
        raise SensitivityError("n_mc must be >= 2")
    fixed, settings = _resolve_fixed(space, fixed or {})
    if var in fixed:
        raise SensitivityError(f"{var!r} cannot be both varied and fixed")
    target = _resolve(space, var, fixed, auto_parent=False)
    if target.kind == "branch":
        dependants = [nv.name for nv in space.nested if nv.parent == var and nv.name in fixed]
        if dependants:
            raise SensitivityError(f"cannot vary {var!r} while fixing its nested {dependants}")
    if grid is None:
        grid = default_grid(space, var, fixed)
    base = _base_draws(space, n_mc, seed)
    values, errs = [], []
    for g in grid:
        mean, se = _estimate(gp, _with(base, space, settings + [(target, _unit_value(space, target, g))]))
        values.append(mean)
        errs.append(se)
    return EffectCurve(var, list(grid), values, errs, n_mc, dict(fixed))


def interaction_effect(
    gp: TrainedGP,
    space: SearchSpace,
    var1: str,
    var2: str,
    grid1: Sequence | None = None,
    levels2: Sequence | None = None,
    n_mc: int = DEFAULT_N_MC,
    seed: int = 0,
    fixed: Mapping | None = None,
) -> list[EffectCurve]:
    """One curve over ``grid1`` for each fixed value of ``var2`` in ``levels2``.

    Nested variables get their parent branch pinned to the enabling level
    for all draws.  Pairing two variables nested under different levels of
    one branch, or a nested variable with its own parent, is an error.
    """
    if var1 == var2:
        raise SensitivityError("interaction needs two distinct variables")
    fixed = dict(fixed or {})
    for name in (var1, var2):
        if name in fixed:
            raise SensitivityError(f"{name!r} cannot be both varied and fixed")
    enabling: dict[str, tuple[str, Any]] = {}
    for name in (var1, var2):
        if name in space.names and space.kind_of(name) == "nested":
            slots = space.nested_slots(name)
            parent = space.nested[slots[0]].parent
            if parent in (var1, var2):
                raise SensitivityError(
                    f"incompatible nesting: {name!r} is nested under {parent!r}, which is also varied"
                )
            if parent in fixed:
                continue
            if len(slots) > 1:
                raise SensitivityError(
                    f"nested variable {name!r} exists under several levels of {parent!r}; fix {parent!r}"
                )
            level = space.nested[slots[0]].parent_level
            if parent in enabling and enabling[parent][1] != level:
                other = enabling[parent][0]
                raise SensitivityError(
                    f"incompatible nesting: {other!r} needs {parent}={enabling[parent][1]!r} "
                    f"but {name!r} needs {parent}={level!r}"
                )
            enabling[parent] = (name, level)
    for parent, (_, level) in enabling.items():
        fixed[parent] = level
    # validates both names against the (possibly extended) conditioning
    _resolve(space, var1, dict(fixed), auto_parent=False)
    _resolve(space, var2, dict(fixed), auto_parent=False)
    if levels2 is None:
        levels2 = default_levels(space, var2, fixed)
    if len(levels2) == 0:
        raise SensitivityError("levels2 is empty")
    if grid1 is None:
        grid1 = default_grid(space, var1, fixed)
    curves = []
    for level in levels2:
        curves.append(main_effect(gp, space, var1, grid1, n_mc, seed, {**fixed, var2: level}))
    return curves

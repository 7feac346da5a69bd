"""Mixed search spaces with branching and nested variables.

A space holds three kinds of variables:

* shared quantitative variables, active in every configuration;
* branching variables, categorical, whose level decides which nested
  variables exist;
* nested variables, either quantitative or qualitative, active only when
  their parent branch takes ``parent_level``.

The same nested name may be declared under several levels of one parent
branch (e.g. ``scheduler`` under both ``SGD`` and ``Adam``).  Each
declaration is its own *slot* with its own kernel parameter, and at most
one of them is active in any configuration, so the flat record stays
unambiguous.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ._optim import lhd_unit

__all__ = [
    "SpaceError",
    "QuantVar",
    "BranchVar",
    "NestedVar",
    "SearchSpace",
    "Configuration",
    "Combo",
    "EncodedPoint",
    "validate",
    "enumerate_categorical_combos",
    "sample_initial_design",
    "sample_uniform",
]

Level = Hashable

# value stored for an inactive nested slot; never read by the kernel
PLACEHOLDER = 0.0


class SpaceError(ValueError):
    """Invalid search-space declaration.  ``field`` names the offender."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class QuantVar:
    name: str
    lower: float
    upper: float
    scale: str = "linear"

    def __post_init__(self):
        _check_bounds(self.name, self.lower, self.upper, self.scale)

    def to_unit(self, x: float) -> float:
        return _to_unit(x, self.lower, self.upper, self.scale)

    def from_unit(self, u: float) -> float:
        return _from_unit(u, self.lower, self.upper, self.scale)


@dataclass(frozen=True)
class BranchVar:
    name: str
    levels: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        _check_levels(self.name, self.levels)


@dataclass(frozen=True)
class NestedVar:
    """A variable that exists only when ``parent == parent_level``.

    Quantitative when ``levels`` is None (then ``lower``/``upper`` are
    required), qualitative otherwise.
    """

    name: str
    parent: str
    parent_level: Level
    lower: float | None = None
    upper: float | None = None
    levels: tuple | None = None
    scale: str = "linear"

    def __post_init__(self):
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
            _check_levels(self.name, self.levels)
            if self.lower is not None or self.upper is not None:
                raise SpaceError(
                    f"nested variable {self.name!r}: give either levels or bounds, not both",
                    self.name,
                )
        else:
            if self.lower is None or self.upper is None:
                raise SpaceError(
                    f"nested variable {self.name!r} needs levels or lower/upper", self.name
                )
            _check_bounds(self.name, self.lower, self.upper, self.scale)

    @property
    def qualitative(self) -> bool:
        return self.levels is not None

    def to_unit(self, x: float) -> float:
        return _to_unit(x, self.lower, self.upper, self.scale)

    def from_unit(self, u: float) -> float:
        return _from_unit(u, self.lower, self.upper, self.scale)


def _check_bounds(name, lower, upper, scale):
    if scale not in ("linear", "log10"):
        raise SpaceError(f"{name}: scale must be 'linear' or 'log10', got {scale!r}", name)
    try:
        lo, hi = float(lower), float(upper)
    except (TypeError, ValueError):
        raise SpaceError(f"{name}: bounds must be numbers", name) from None
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise SpaceError(f"{name}: bounds must be finite", name)
    if not lo < hi:
        raise SpaceError(f"{name}: lower ({lo}) must be < upper ({hi})", name)
    if scale == "log10" and lo <= 0:
        raise SpaceError(f"{name}: log10 scale requires lower > 0", name)


def _check_levels(name, levels):
    if len(levels) < 2:
        raise SpaceError(f"{name}: needs at least 2 levels", name)
    if len(set(levels)) != len(levels):
        raise SpaceError(f"{name}: level labels must be unique", name)


def _to_unit(x, lower, upper, scale):
    if scale == "log10":
        lo, hi = math.log10(lower), math.log10(upper)
        return (math.log10(x) - lo) / (hi - lo)
    return (x - lower) / (upper - lower)


def _from_unit(u, lower, upper, scale):
    u = min(max(float(u), 0.0), 1.0)
    if scale == "log10":
        lo, hi = math.log10(lower), math.log10(upper)
        return min(max(10.0 ** (lo + u * (hi - lo)), lower), upper)
    return min(max(lower + u * (upper - lower), lower), upper)


class Combo(NamedTuple):
    """One joint assignment of all branch levels and active qualitative nested levels."""

    branch: dict
    nested: dict

    def key(self) -> tuple:
        return tuple(self.branch.values()) + tuple(sorted(self.nested.items(), key=repr))


@dataclass(frozen=True)
class Configuration:
    """A point ``(w, z, v)``; ``nested`` holds exactly the active nested values."""

    quant: dict = field(default_factory=dict)
    branch: dict = field(default_factory=dict)
    nested: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = dict(self.quant)
        rec.update(self.branch)
        rec.update(self.nested)
        return rec

    def key(self) -> tuple:
        return (
            tuple(sorted(self.quant.items())),
            tuple(sorted(self.branch.items(), key=repr)),
            tuple(sorted(self.nested.items(), key=repr)),
        )

    def __repr__(self):
        inner = ", ".join(f"{k}={v!r}" for k, v in self.to_record().items())
        return f"Configuration({inner})"


@dataclass(frozen=True)
class EncodedPoint:
    """Model-scale view of a configuration.

    ``w`` holds shared quantitative values mapped to [0, 1] (log10 first
    when requested), ``z`` the branch level indices and ``v`` one entry per
    nested slot: the level index for qualitative slots, the unit-scaled
    value for quantitative ones, ``PLACEHOLDER`` when inactive.
    """

    w: np.ndarray
    z: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class SearchSpace:
    quant: tuple = ()
    branch: tuple = ()
    nested: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "quant", tuple(self.quant))
        object.__setattr__(self, "branch", tuple(self.branch))
        object.__setattr__(self, "nested", tuple(self.nested))
        seen: set[str] = set()
        for var in self.quant + self.branch:
            if var.name in seen:
                raise SpaceError(f"duplicate variable name {var.name!r}", var.name)
            seen.add(var.name)
        branches = {b.name: b for b in self.branch}
        nested_owner: dict[str, str] = {}
        slot_keys: set = set()
        for nv in self.nested:
            if nv.parent not in branches:
                raise SpaceError(
                    f"nested variable {nv.name!r}: unknown parent branch {nv.parent!r}", nv.name
                )
            if nv.parent_level not in branches[nv.parent].levels:
                raise SpaceError(
                    f"nested variable {nv.name!r}: {nv.parent_level!r} is not a level of {nv.parent!r}",
                    nv.name,
                )
            if nv.name in seen:
                raise SpaceError(f"duplicate variable name {nv.name!r}", nv.name)
            owner = nested_owner.setdefault(nv.name, nv.parent)
            if owner != nv.parent:
                raise SpaceError(
                    f"nested name {nv.name!r} reused under a different parent branch", nv.name
                )
            if (nv.name, nv.parent_level) in slot_keys:
                raise SpaceError(
                    f"nested variable {nv.name!r} declared twice under {nv.parent}={nv.parent_level!r}",
                    nv.name,
                )
            slot_keys.add((nv.name, nv.parent_level))

    # -- dimensions -------------------------------------------------------

    @property
    def d(self) -> int:
        return len(self.quant)

    @property
    def q(self) -> int:
        return len(self.branch)

    @property
    def p(self) -> int:
        """Total variable count ``d + q + sum_k m_k`` (distinct nested names)."""
        return self.d + self.q + len({nv.name for nv in self.nested})

    @cached_property
    def names(self) -> tuple[str, ...]:
        out = [v.name for v in self.quant] + [b.name for b in self.branch]
        for nv in self.nested:
            if nv.name not in out:
                out.append(nv.name)
        return tuple(out)

    @cached_property
    def layout(self) -> "Layout":
        return Layout.from_space(self)

    def branch_index(self, name: str) -> int:
        for i, b in enumerate(self.branch):
            if b.name == name:
                return i
        raise KeyError(name)

    def nested_slots(self, name: str) -> list[int]:
        return [t for t, nv in enumerate(self.nested) if nv.name == name]

    def active_slots(self, branch_values: Mapping[str, Level]) -> list[int]:
        return [
            t
            for t, nv in enumerate(self.nested)
            if branch_values.get(nv.parent) == nv.parent_level
        ]

    def kind_of(self, name: str) -> str:
        if any(v.name == name for v in self.quant):
            return "quant"
        if any(b.name == name for b in self.branch):
            return "branch"
        if any(nv.name == name for nv in self.nested):
            return "nested"
        raise KeyError(name)

    @cached_property
    def combos(self) -> list[Combo]:
        return enumerate_categorical_combos(self)

    @cached_property
    def _combo_lookup(self) -> dict:
        return {c.key(): i for i, c in enumerate(self.combos)}

    def combo_of(self, cfg: Configuration) -> int:
        """Index into ``combos`` for the categorical part of ``cfg``."""
        nested_q = {
            k: val
            for k, val in cfg.nested.items()
            if any(nv.name == k and nv.qualitative for nv in self.nested)
        }
        return self._combo_lookup[Combo(dict(cfg.branch), nested_q).key()]

    # -- encoding ----------------------------------------------------------

    def encode(self, cfg: Configuration) -> EncodedPoint:
        w = np.array([var.to_unit(float(cfg.quant[var.name])) for var in self.quant], dtype=float)
        z = np.array(
            [b.levels.index(cfg.branch[b.name]) for b in self.branch], dtype=np.int64
        )
        v = np.full(len(self.nested), PLACEHOLDER)
        for t in self.active_slots(cfg.branch):
            nv = self.nested[t]
            val = cfg.nested[nv.name]
            v[t] = nv.levels.index(val) if nv.qualitative else nv.to_unit(float(val))
        return EncodedPoint(w, z, v)

    def encode_many(self, cfgs: Sequence[Configuration]) -> EncodedPoint:
        """Stack encodings row-wise: ``w`` is (n, d), ``z`` (n, q), ``v`` (n, t)."""
        pts = [self.encode(c) for c in cfgs]
        n = len(pts)
        return EncodedPoint(
            np.array([p.w for p in pts], dtype=float).reshape(n, self.d),
            np.array([p.z for p in pts], dtype=np.int64).reshape(n, self.q),
            np.array([p.v for p in pts], dtype=float).reshape(n, len(self.nested)),
        )

    def decode(self, pt: EncodedPoint) -> Configuration:
        quant = {var.name: var.from_unit(pt.w[i]) for i, var in enumerate(self.quant)}
        branch = {b.name: b.levels[int(pt.z[i])] for i, b in enumerate(self.branch)}
        nested = {}
        for t in self.active_slots(branch):
            nv = self.nested[t]
            nested[nv.name] = nv.levels[int(pt.v[t])] if nv.qualitative else nv.from_unit(pt.v[t])
        return Configuration(quant, branch, nested)

    def from_record(self, record: Mapping[str, Any]) -> Configuration:
        """Split a flat ``name -> value`` record; unknown names raise ``KeyError``."""
        quant, branch, nested = {}, {}, {}
        for key, val in record.items():
            kind = self.kind_of(key)
            if kind == "quant":
                quant[key] = float(val)
            elif kind == "branch":
                branch[key] = val
            else:
                nested[key] = val
        for key in list(nested):
            slots = [self.nested[t] for t in self.nested_slots(key)]
            if all(not nv.qualitative for nv in slots):
                nested[key] = float(nested[key])
        return Configuration(quant, branch, nested)


@dataclass(frozen=True)
class Layout:
    """Flat integer/float arrays describing the kernel structure of a space."""

    parent: np.ndarray  # branch index of each nested slot
    level: np.ndarray  # parent level index of each nested slot
    qualitative: np.ndarray  # 1 for qualitative slots
    n_levels: np.ndarray  # g for qualitative slots, 0 otherwise

    @classmethod
    def from_space(cls, space: SearchSpace) -> "Layout":
        parent, level, qual, g = [], [], [], []
        for nv in space.nested:
            k = space.branch_index(nv.parent)
            parent.append(k)
            level.append(space.branch[k].levels.index(nv.parent_level))
            qual.append(1 if nv.qualitative else 0)
            g.append(len(nv.levels) if nv.qualitative else 0)
        return cls(
            np.array(parent, dtype=np.int64),
            np.array(level, dtype=np.int64),
            np.array(qual, dtype=np.int64),
            np.array(g, dtype=np.int64),
        )


def validate(space: SearchSpace, cfg: Configuration) -> list[str]:
    """All invariant violations of ``cfg`` in ``space``; empty means valid."""
    out: list[str] = []
    quant_names = {v.name for v in space.quant}
    branch_names = {b.name for b in space.branch}
    nested_names = {nv.name for nv in space.nested}
    for key in cfg.quant:
        if key not in quant_names:
            out.append(f"unknown quantitative variable {key!r}")
    for key in cfg.branch:
        if key not in branch_names:
            out.append(f"unknown branching variable {key!r}")
    for key in cfg.nested:
        if key not in nested_names:
            out.append(f"unknown nested variable {key!r}")

    for var in space.quant:
        if var.name not in cfg.quant:
            out.append(f"missing quantitative variable {var.name!r}")
            continue
        x = cfg.quant[var.name]
        if not _in_range(x, var.lower, var.upper):
            out.append(f"{var.name}={x!r} outside [{var.lower}, {var.upper}]")
    for b in space.branch:
        if b.name not in cfg.branch:
            out.append(f"missing branching variable {b.name!r}")
        elif cfg.branch[b.name] not in b.levels:
            out.append(f"{b.name}={cfg.branch[b.name]!r} is not a level of {b.name!r}")

    active = {space.nested[t].name: space.nested[t] for t in space.active_slots(cfg.branch)}
    for key, val in cfg.nested.items():
        if key not in nested_names:
            continue
        if key not in active:
            out.append(f"inactive nested value {key!r} present")
            continue
        nv = active[key]
        if nv.qualitative:
            if val not in nv.levels:
                out.append(f"{key}={val!r} is not a level of {key!r}")
        elif not _in_range(val, nv.lower, nv.upper):
            out.append(f"{key}={val!r} outside [{nv.lower}, {nv.upper}]")
    for key in active:
        if key not in cfg.nested:
            out.append(f"missing active nested variable {key!r}")
    return out


def _in_range(x, lower, upper) -> bool:
    try:
        x = float(x)
    except (TypeError, ValueError):
        return False
    return math.isfinite(x) and lower <= x <= upper


def enumerate_categorical_combos(space: SearchSpace) -> list[Combo]:
    """Every joint (branch levels, active qualitative nested levels) assignment.

    Quantitative nested variables are ranges, not enumeration entries.  A
    space without branch variables has exactly one (empty) combo.
    """
    per_branch: list[list[tuple[Level, dict]]] = []
    for b in space.branch:
        options = []
        for level in b.levels:
            quals = [
                nv
                for nv in space.nested
                if nv.parent == b.name and nv.parent_level == level and nv.qualitative
            ]
            for values in itertools.product(*(nv.levels for nv in quals)):
                options.append((level, {nv.name: val for nv, val in zip(quals, values)}))
        per_branch.append(options)

    combos = []
    for choice in itertools.product(*per_branch):
        branch = {b.name: lvl for b, (lvl, _) in zip(space.branch, choice)}
        nested: dict = {}
        for _, nd in choice:
            nested.update(nd)
        combos.append(Combo(branch, nested))
    return combos


def _quant_slots(space: SearchSpace, branch: Mapping) -> list[int]:
    return [t for t in space.active_slots(branch) if not space.nested[t].qualitative]


def _build(space: SearchSpace, combo: Combo, w_unit, nested_unit: Mapping[int, float]):
    quant = {var.name: var.from_unit(w_unit[i]) for i, var in enumerate(space.quant)}
    nested = dict(combo.nested)
    for t in _quant_slots(space, combo.branch):
        nv = space.nested[t]
        nested[nv.name] = nv.from_unit(nested_unit[t])
    # keep declaration order of nested names
    order = [nv.name for nv in space.nested]
    nested = {k: nested[k] for k in sorted(nested, key=order.index)}
    return Configuration(quant, dict(combo.branch), nested)


def sample_initial_design(space: SearchSpace, n: int, rng_seed: int) -> list[Configuration]:
    """Latin hypercube on quantitative dimensions, balanced cycling over combos.

    Every combo receives ``floor(n/L)`` or ``ceil(n/L)`` points.  Nested
    quantitative slots get their own LHD column; only active rows use it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    combos = space.combos
    quant_nested = [t for t, nv in enumerate(space.nested) if not nv.qualitative]
    u = lhd_unit(n, space.d + len(quant_nested), rng)
    order = rng.permutation(len(combos))
    design = []
    for i in range(n):
        combo = combos[order[i % len(combos)]]
        nested_unit = {t: u[i, space.d + j] for j, t in enumerate(quant_nested)}
        design.append(_build(space, combo, u[i, : space.d], nested_unit))
    return design


def sample_uniform(
    space: SearchSpace, rng: np.random.Generator, by: str = "combo"
) -> Configuration:
    """One uniformly random valid configuration.

    ``by="combo"`` draws the categorical part uniformly over the L combos;
    ``by="branch"`` draws each branch level uniformly and nested levels
    conditionally, which weights combos unequally when levels carry
    different numbers of nested options.
    """
    if by == "combo":
        combo = space.combos[int(rng.integers(len(space.combos)))]
    elif by == "branch":
        branch = {b.name: b.levels[int(rng.integers(len(b.levels)))] for b in space.branch}
        nested = {}
        for t in space.active_slots(branch):
            nv = space.nested[t]
            if nv.qualitative:
                nested[nv.name] = nv.levels[int(rng.integers(len(nv.levels)))]
        combo = Combo(branch, nested)
    else:
        raise ValueError(f"unknown sampling measure {by!r}")
    w = rng.random(space.d)
    nested_unit = {t: rng.random() for t in _quant_slots(space, combo.branch)}
    return _build(space, combo, w, nested_unit)


def space_from_dict(data: Mapping[str, Any]) -> SearchSpace:
    """Build a space from the ``space`` section of a config file."""
    if not isinstance(data, Mapping):
        raise SpaceError("space section must be a mapping", "space")

    def entries(key) -> Iterable[Mapping]:
        items = data.get(key) or []
        if not isinstance(items, list):
            raise SpaceError(f"space.{key} must be a list", f"space.{key}")
        for i, item in enumerate(items):
            if not isinstance(item, Mapping) or "name" not in item:
                raise SpaceError(f"space.{key}[{i}] needs a name", f"space.{key}[{i}]")
            yield item

    def build(cls, item, key):
        try:
            return cls(**item)
        except SpaceError as exc:
            raise SpaceError(str(exc), f"space.{key}.{item['name']}") from None
        except TypeError as exc:
            raise SpaceError(str(exc), f"space.{key}.{item['name']}") from None

    unknown = set(data) - {"quantitative", "branching", "nested"}
    if unknown:
        raise SpaceError(f"unknown space sections: {sorted(unknown)}", "space")
    quant = [build(QuantVar, it, "quantitative") for it in entries("quantitative")]
    branch = [build(BranchVar, it, "branching") for it in entries("branching")]
    nested = [build(NestedVar, it, "nested") for it in entries("nested")]
    return SearchSpace(quant, branch, nested)


def space_to_dict(space: SearchSpace) -> dict:
    def nested_entry(nv: NestedVar) -> dict:
        out = {"name": nv.name, "parent": nv.parent, "parent_level": nv.parent_level}
        if nv.qualitative:
            out["levels"] = list(nv.levels)
        else:
            out.update(lower=nv.lower, upper=nv.upper, scale=nv.scale)
        return out

    return {
        "quantitative": [
            {"name": v.name, "lower": v.lower, "upper": v.upper, "scale": v.scale}
            for v in space.quant
        ],
        "branching": [{"name": b.name, "levels": list(b.levels)} for b in space.branch],
        "nested": [nested_entry(nv) for nv in space.nested],
    }

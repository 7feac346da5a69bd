"""Expected improvement and its maximization over mixed spaces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import _optim
from .gp import TrainedGP, posterior
from .space import PLACEHOLDER, Combo, Configuration, EncodedPoint, SearchSpace, sample_uniform

__all__ = [
    "AcqOptions",
    "Proposal",
    "expected_improvement",
    "maximize_ei",
    "propose",
    "propose_batch",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AcqOptions:
    epsilon: float = 0.1
    n_raw: int = 256
    n_refine: int = 3
    batch_size: int = 1
    fantasy: str = "believer"
    # "observed": max observed y; "posterior": max posterior mean at observed points
    y_max_mode: str = "observed"
    refine_tol: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        for name in ("n_raw", "n_refine", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fantasy not in ("believer", "constant_liar_max"):
            raise ValueError(f"fantasy must be 'believer' or 'constant_liar_max', got {self.fantasy!r}")
        if self.y_max_mode not in ("observed", "posterior"):
            raise ValueError(f"y_max_mode must be 'observed' or 'posterior', got {self.y_max_mode!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "AcqOptions":
        return cls(**data)


@dataclass(frozen=True)
class Proposal:
    config: Configuration
    acq_value: float
    # "ei", "epsilon_random", "fantasy_step_<k>" or "fallback_random"
    source: str


def expected_improvement(mean, var, y_max):
    """``E[(Y - y_max)+]`` for ``Y ~ N(mean, var)``; vectorized, never negative."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    diff = mean - y_max
    s = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = np.where(s > 0, diff / np.where(s > 0, s, 1.0), 0.0)
        ei = np.where(
            s > 0,
            s * _INV_SQRT_2PI * np.exp(-0.5 * u * u) + diff * ndtr(u),
            np.maximum(diff, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


class _ComboEncoder:
    """Unit-box coordinates for one combo -> encoded points."""

    def __init__(self, space: SearchSpace, combo: Combo):
        self.space = space
        self.z = np.array([b.levels.index(combo.branch[b.name]) for b in space.branch], dtype=np.int64)
        self.v = np.full(len(space.nested), PLACEHOLDER)
        self.quant_slots = []
        for t in space.active_slots(combo.branch):
            nv = space.nested[t]
            if nv.qualitative:
                self.v[t] = nv.levels.index(combo.nested[nv.name])
            else:
                self.quant_slots.append(t)
        self.dims = space.d + len(self.quant_slots)

    def encode(self, U: np.ndarray) -> EncodedPoint:
        U = np.atleast_2d(U)
        n = U.shape[0]
        v = np.tile(self.v, (n, 1))
        for j, t in enumerate(self.quant_slots):
            v[:, t] = U[:, self.space.d + j]
        return EncodedPoint(U[:, : self.space.d], np.tile(self.z, (n, 1)), v)

    def decode(self, u: np.ndarray) -> Configuration:
        pt = self.encode(u)
        return self.space.decode(EncodedPoint(pt.w[0], pt.z[0], pt.v[0]))


def _ei_at(gp: TrainedGP, pts: EncodedPoint, y_max: float) -> np.ndarray:
    mean, var = posterior(gp, pts)
    return expected_improvement(mean, var, y_max)


def _refine(fn, u0, f0, tol):
    """Compass search polling all 2P neighbours per evaluation batch."""
    u, fu = u0.copy(), f0
    h = 0.1
    while h >= tol:
        polls = []
        for i in range(u.size):
            for sign in (1.0, -1.0):
                y = u.copy()
                y[i] = min(max(u[i] + sign * h, 0.0), 1.0)
                if y[i] != u[i]:
                    polls.append(y)
        if not polls:
            break
        vals = fn(np.array(polls))
        k = int(np.argmax(vals))
        if vals[k] > fu:
            u, fu = polls[k], float(vals[k])
        else:
            h *= 0.5
    return u, fu


def maximize_ei(
    gp: TrainedGP, space: SearchSpace, y_max: float, opts: AcqOptions | None = None, rng_seed: int = 0
) -> Proposal:
    """Best EI over every categorical combo.

    Per combo: ``n_raw`` Latin hypercube candidates over the active
    quantitative coordinates, then compass refinement from the best
    ``n_refine``.  Ties resolve to the earlier combo, then the earlier
    candidate.
    """
    opts = opts or AcqOptions()
    rng = np.random.default_rng(rng_seed)
    best = None  # (value, config)
    for combo in space.combos:
        enc = _ComboEncoder(space, combo)
        if enc.dims == 0:
            u_best = np.zeros(0)
            val = float(_ei_at(gp, enc.encode(np.zeros((1, 0))), y_max)[0])
        else:
            U = _optim.lhd_unit(opts.n_raw, enc.dims, rng)
            ei = _ei_at(gp, enc.encode(U), y_max)
            order = np.argsort(-ei, kind="stable")[: opts.n_refine]
            u_best, val = None, -math.inf
            for idx in order:
                u, fu = _refine(lambda P: _ei_at(gp, enc.encode(P), y_max), U[idx], float(ei[idx]), opts.refine_tol)
                if fu > val:
                    u_best, val = u, fu
        if best is None or val > best[0]:
            best = (val, enc.decode(u_best.reshape(1, -1)))
    return Proposal(best[1], best[0], "ei")


def _current_ymax(gp: TrainedGP, y_max: float | None, opts: AcqOptions) -> float:
    if y_max is not None:
        return y_max
    if opts.y_max_mode == "posterior":
        mean, _ = posterior(gp, gp.dataset.points)
        return float(np.max(mean))
    return float(np.max(gp.dataset.y))


def propose(
    gp: TrainedGP,
    space: SearchSpace,
    y_max: float | None = None,
    opts: AcqOptions | None = None,
    rng_seed: int = 0,
) -> Proposal:
    """Epsilon-greedy EI: a uniform random configuration with probability ``epsilon``."""
    opts = opts or AcqOptions()
    y_max = _current_ymax(gp, y_max, opts)
    rng = np.random.default_rng(rng_seed)
    if rng.random() < opts.epsilon:
        cfg = sample_uniform(space, rng, by="combo")
        val = float(_ei_at(gp, space.encode(cfg), y_max))
        return Proposal(cfg, val, "epsilon_random")
    return maximize_ei(gp, space, y_max, opts, int(rng.integers(2**63)))


def propose_batch(
    gp: TrainedGP,
    space: SearchSpace,
    y_max: float | None = None,
    opts: AcqOptions | None = None,
    rng_seed: int = 0,
) -> list[Proposal]:
    """``opts.batch_size`` distinct proposals via sequential fantasies.

    After each pick the posterior is conditioned on a fantasy outcome
    (posterior mean for ``believer``, the running ``y_max`` for
    ``constant_liar_max``) without refitting.  The caller's ``gp`` is left
    untouched.
    """
    opts = opts or AcqOptions()
    y_max = _current_ymax(gp, y_max, opts)
    seeds = np.random.SeedSequence(rng_seed).generate_state(opts.batch_size, dtype=np.uint64)
    current = gp
    out: list[Proposal] = []
    seen: set = set()
    for k in range(opts.batch_size):
        seed = rng_seed if k == 0 else int(seeds[k])
        p = propose(current, space, y_max, opts, seed)
        if p.config.key() in seen:
            rng = np.random.default_rng([seed, 1])
            while True:
                cfg = sample_uniform(space, rng, by="combo")
                if cfg.key() not in seen:
                    break
            p = Proposal(cfg, float(_ei_at(current, space.encode(cfg), y_max)), "epsilon_random")
        elif k > 0 and p.source == "ei":
            p = Proposal(p.config, p.acq_value, f"fantasy_step_{k}")
        out.append(p)
        seen.add(p.config.key())
        if k + 1 < opts.batch_size:
            x = space.encode(p.config)
            if opts.fantasy == "believer":
                fantasy, _ = posterior(current, x)
            else:
                fantasy = y_max
            current = current.condition_on(x, fantasy)
            y_max = max(y_max, fantasy)
    return out

"""Synthetic objectives and the replicate harness for comparing search methods."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .space import BranchVar, Configuration, NestedVar, QuantVar, SearchSpace

__all__ = [
    "SyntheticObjective",
    "BenchReport",
    "bn2d_space",
    "eval_bn2d",
    "cnn_mock_space",
    "OBJECTIVES",
    "get_objective",
    "run_benchmark",
    "replicate_seed",
]


def bn2d_space() -> SearchSpace:
    return SearchSpace(
        quant=[QuantVar("x1", -10.0, 10.0), QuantVar("x2", -5.0, 5.0)],
        branch=[BranchVar("z", (1, 2))],
        nested=[
            NestedVar("v", "z", 1, levels=(1, 2, 3)),
            NestedVar("v", "z", 2, levels=(1, 2)),
        ],
    )


def bn2d_centers(z: int, v: int) -> tuple[float, float]:
    if z == 1 and v in (1, 2, 3):
        return 3.0 - 0.5 * v, 5.0 - v
    if z == 2 and v in (1, 2):
        return -1.0 + v, 7.0 - v
    raise ValueError(f"invalid (z, v) combination ({z!r}, {v!r})")


def eval_bn2d(x1, x2, z, v, noise_sd: float = 0.0, seed=None) -> float:
    """Two-bump test function with one branch ``z`` and nested ``v``.

    Global maximum 5 at ``(x1, x2, z, v) = (6, 0, 2, 1)``.  ``seed`` may be
    an int or a ``numpy.random.Generator`` and is only used when
    ``noise_sd > 0``.
    """
    c1, c2 = bn2d_centers(z, v)
    f = (
        (v / 2.0) * math.exp(-((x1 - c1) ** 2))
        + (2.0 / v) * math.exp(-((x1 - c2) ** 2) / 10.0)
        + 1.0 / (x2 * x2 + 1.0)
        + z
    )
    if noise_sd > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        f += noise_sd * rng.standard_normal()
    return f


def cnn_mock_space() -> SearchSpace:
    """ResNet/MobileNet tuning space with five shared variables."""
    return SearchSpace(
        quant=[
            QuantVar("learning_rate", 1e-3, 1.0, "log10"),
            QuantVar("epoch", 50.0, 200.0),
            QuantVar("batch", 64.0, 360.0),
            QuantVar("momentum", 0.0, 0.999),
            QuantVar("weight_decay", 1e-6, 0.999, "log10"),
        ],
        branch=[BranchVar("network", ("ResNet", "MobileNet"))],
        nested=[
            NestedVar("depth", "network", "ResNet", levels=(18, 34, 50, 101)),
            NestedVar("multiplier", "network", "MobileNet", levels=(0.25, 0.5, 1.0)),
        ],
    )


def _cnn_mock_factory() -> Callable[[Configuration], float]:
    """A fixed smooth random surface standing in for validation accuracy (not a real CNN)."""
    space = cnn_mock_space()
    rng = np.random.default_rng(20240101)
    n_basis = 12
    centers = rng.random((n_basis, space.d))
    weights = rng.normal(0.0, 1.0, n_basis)
    combo_offsets = rng.normal(0.0, 0.5, len(space.combos))
    combo_tilt = rng.normal(0.0, 0.5, (len(space.combos), space.d))

    def f(cfg: Configuration) -> float:
        w = space.encode(cfg).w
        c = space.combo_of(cfg)
        bumps = weights @ np.exp(-8.0 * np.sum((centers - w) ** 2, axis=1))
        acc = 80.0 + 3.0 * bumps + 2.0 * combo_offsets[c] + combo_tilt[c] @ (w - 0.5)
        return float(acc)

    return f


@dataclass
class SyntheticObjective:
    name: str
    space: SearchSpace
    noise_sd: float
    true_fn: Callable[[Configuration], float] = field(repr=False)
    true_optimum: tuple | None = None

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")

    def true_value(self, cfg: Configuration) -> float:
        return self.true_fn(cfg)

    def __call__(self, cfg: Configuration, rng: np.random.Generator | None = None) -> float:
        f = self.true_fn(cfg)
        if self.noise_sd > 0:
            if rng is None:
                raise ValueError("a noisy objective needs an rng")
            f += self.noise_sd * rng.standard_normal()
        return f


def _bn2d(noise_sd: float = 0.2) -> SyntheticObjective:
    def true_fn(cfg):
        return eval_bn2d(cfg.quant["x1"], cfg.quant["x2"], cfg.branch["z"], cfg.nested["v"])

    opt = Configuration({"x1": 6.0, "x2": 0.0}, {"z": 2}, {"v": 1})
    return SyntheticObjective("bn2d", bn2d_space(), noise_sd, true_fn, (opt, true_fn(opt)))


def _cnn_mock(noise_sd: float = 0.0) -> SyntheticObjective:
    return SyntheticObjective("cnn_mock", cnn_mock_space(), noise_sd, _cnn_mock_factory())


OBJECTIVES: dict[str, Callable[..., SyntheticObjective]] = {
    "bn2d": _bn2d,
    "cnn_mock": _cnn_mock,
}


def get_objective(name: str, noise_sd: float | None = None) -> SyntheticObjective:
    try:
        factory = OBJECTIVES[name]
    except KeyError:
        raise KeyError(f"unknown builtin objective {name!r}; known: {sorted(OBJECTIVES)}") from None
    return factory() if noise_sd is None else factory(noise_sd)


def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([seed, replicate]).generate_state(1)[0])


@dataclass
class BenchReport:
    method: str
    seeds: list[int]
    best_observed: list[list[float]]
    # running max of the true value at the recommendation after each evaluation
    best_true: list[list[float]]
    recommendations: list[dict]
    # true value at the final recommendation; can sit below best_true[-1]
    true_at_recommendation: list[float]

    def final(self, which: str = "observed") -> np.ndarray:
        """Per-replicate ``observed`` best, or ``true`` value at the final recommendation."""
        if which == "observed":
            return np.array([t[-1] for t in self.best_observed])
        return np.array(self.true_at_recommendation, dtype=float)

    def summary(self) -> dict:
        def stats(a):
            q1, med, q3 = np.percentile(a, [25, 50, 75])
            return {"mean": float(a.mean()), "median": float(med), "q1": float(q1), "q3": float(q3)}

        obs, true = self.final("observed"), self.final("true")
        return {
            "method": self.method,
            "replicates": len(self.seeds),
            "seeds": self.seeds,
            "mean_final_best": float(obs.mean()),
            "final_best_observed": stats(obs),
            "final_true_at_recommendation": stats(true),
        }

    def trace_rows(self):
        for r, (obs, true) in enumerate(zip(self.best_observed, self.best_true)):
            for i, (a, b) in enumerate(zip(obs, true)):
                yield {
                    "method": self.method,
                    "replicate": r,
                    "eval_index": i,
                    "best_observed": repr(float(a)),
                    "best_true": repr(float(b)),
                }

    def traces_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf,
            fieldnames=["method", "replicate", "eval_index", "best_observed", "best_true"],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(self.trace_rows())
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _true_trace(objective, observations) -> tuple[list[float], float]:
    """Running max of the true value at the recommendation, and its final value."""
    out, best_y, current, best = [], -math.inf, -math.inf, -math.inf
    for cfg, y in observations:
        if y is not None and y > best_y:
            best_y, current = y, objective.true_value(cfg)
            best = max(best, current)
        out.append(best)
    return out, current


def _observed_trace(observations) -> list[float]:
    out, best = [], -math.inf
    for _, y in observations:
        if y is not None:
            best = max(best, y)
        out.append(best)
    return out


def _random_search(objective, n_total, seed):
    from .space import sample_uniform

    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng([seed, 1])
    obs = []
    for _ in range(n_total):
        cfg = sample_uniform(objective.space, rng)
        obs.append((cfg, objective(cfg, noise_rng)))
    return obs


def run_benchmark(
    method: str,
    objective: SyntheticObjective,
    n_init: int = 10,
    n_adaptive: int = 50,
    replicates: int = 20,
    seed: int = 0,
    batch_size: int = 5,
    fit_options=None,
    acq_options=None,
    progress: Callable[[str], None] | None = None,
) -> BenchReport:
    """Run ``replicates`` independent studies of one method.

    ``method`` is ``bn_sequential``, ``bn_batch`` (``batch_size`` points per
    generation) or ``random_search``.  Replicate ``r`` uses seed
    ``replicate_seed(seed, r)`` for every method, so reports from the same
    master seed are paired.
    """
    from .loop import Study

    if n_init < 1 or n_adaptive < 0 or replicates < 1:
        raise ValueError("n_init, replicates must be positive and n_adaptive >= 0")
    seeds = [replicate_seed(seed, r) for r in range(replicates)]
    best_obs, best_true, recs, finals = [], [], [], []
    for r, s in enumerate(seeds):
        if method == "random_search":
            obs = _random_search(objective, n_init + n_adaptive, s)
        elif method in ("bn_sequential", "bn_batch"):
            study = Study.create(
                objective.space,
                n_init=n_init,
                n_adaptive=n_adaptive,
                seed=s,
                batch_size=batch_size if method == "bn_batch" else 1,
                fit_options=fit_options,
                acq_options=acq_options,
                objective=objective.name,
            )
            study.run(objective)
            obs = [(o.config, o.y) for o in study.observations]
        else:
            raise ValueError(f"unknown method {method!r}")
        best_obs.append(_observed_trace(obs))
        trace, final = _true_trace(objective, obs)
        best_true.append(trace)
        finals.append(final)
        ys = [(y, -i) for i, (_, y) in enumerate(obs) if y is not None]
        _, neg_i = max(ys)
        recs.append(obs[-neg_i][0].to_record())
        if progress:
            progress(f"{method} replicate {r}: best observed {best_obs[-1][-1]:.4f}, "
                     f"true at recommendation {final:.4f}")
    label = f"bn_batch({batch_size})" if method == "bn_batch" else method
    return BenchReport(label, seeds, best_obs, best_true, recs, finals)

"""Study orchestration: initial design, fit, acquire, evaluate, repeat.

A study advances in *generations*.  Generation 0 is the initial design;
every later generation holds ``batch_size`` proposals (one in sequential
mode) made from a single GP fit.  ``suggest`` hands out the pending
generation with tokens, ``tell`` binds results, and a generation is
committed, in token order, once every token is resolved.  Builtin
objectives just run ``suggest``/``tell`` in-process.

All randomness derives from ``(seed, generation)`` so a study reloaded from
JSON continues exactly as an uninterrupted one would.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .acquisition import AcqOptions, Proposal, propose, propose_batch
from .gp import Dataset, FactorizationError, FitError, FitOptions, TrainedGP, fit, posterior
from .kernel import KernelParams
from .space import (
    Configuration,
    SearchSpace,
    sample_initial_design,
    sample_uniform,
    space_from_dict,
    space_to_dict,
    validate,
)

__all__ = ["ProtocolError", "Observation", "Study", "init_study", "step", "recommend"]

SCHEMA_VERSION = 1
MAX_NUGGET = 1e-2

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """Ask-tell misuse: unknown token or a token told twice."""


@dataclass
class Observation:
    config: Configuration
    y: float | None  # None for a failed evaluation
    generation: int
    source: str
    token: str

    @property
    def ok(self) -> bool:
        return self.y is not None


@dataclass
class Pending:
    token: str
    config: Configuration
    source: str
    result: float | None = None
    told: bool = False


def _derive(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0])


def _token(seed: int, generation: int, index: int) -> str:
    digest = hashlib.sha256(f"{seed}:{generation}:{index}".encode()).hexdigest()[:10]
    return f"{generation}-{index}-{digest}"


@dataclass
class Study:
    space: SearchSpace
    n_init: int
    n_adaptive: int
    seed: int
    batch_size: int = 1
    fit_options: FitOptions = field(default_factory=FitOptions)
    acq_options: AcqOptions = field(default_factory=AcqOptions)
    objective: str | None = None
    observations: list[Observation] = field(default_factory=list)
    pending: list[Pending] = field(default_factory=list)
    generation: int = 0
    warm_start: dict | None = None

    # -- construction ---------------------------------------------------

    @classmethod
    def create(
        cls,
        space: SearchSpace,
        n_init: int,
        n_adaptive: int,
        seed: int,
        batch_size: int = 1,
        fit_options: FitOptions | None = None,
        acq_options: AcqOptions | None = None,
        objective: str | None = None,
    ) -> "Study":
        if n_init < 2:
            raise ValueError("n_init must be >= 2")
        if n_adaptive < 0 or batch_size < 1:
            raise ValueError("n_adaptive must be >= 0 and batch_size >= 1")
        acq = acq_options or AcqOptions()
        acq = replace(acq, batch_size=batch_size)
        study = cls(
            space, n_init, n_adaptive, seed, batch_size,
            fit_options or FitOptions(), acq, objective,
        )
        study._queue_initial()
        return study

    def _queue_initial(self):
        design = sample_initial_design(self.space, self.n_init, _derive(self.seed, 0, 0))
        self.pending = [
            Pending(_token(self.seed, 0, i), cfg, "initial") for i, cfg in enumerate(design)
        ]

    # -- bookkeeping ------------------------------------------------------

    @property
    def n_adaptive_done(self) -> int:
        return sum(1 for o in self.observations if o.generation > 0)

    @property
    def done(self) -> bool:
        return not self.pending and self.generation > 0 and self.n_adaptive_done >= self.n_adaptive

    @property
    def best_so_far(self) -> list[float | None]:
        out, best = [], None
        for o in self.observations:
            if o.ok and (best is None or o.y > best):
                best = o.y
            out.append(best)
        return out

    def successful(self) -> list[Observation]:
        return [o for o in self.observations if o.ok]

    def recommend(self) -> tuple[Configuration, float]:
        """Observation with the largest y; ties go to the earliest."""
        ok = self.successful()
        if not ok:
            raise ValueError("no successful observations")
        best = ok[0]
        for o in ok[1:]:
            if o.y > best.y:
                best = o
        return best.config, best.y

    # -- model ------------------------------------------------------------

    def fit_model(self, seed: int | None = None) -> TrainedGP:
        """Fit on all successful observations, escalating the nugget on failure."""
        ok = self.successful()
        if len(ok) < 2:
            raise FitError(f"need >= 2 successful observations, have {len(ok)}")
        ds = Dataset.from_configs(self.space, [o.config for o in ok], [o.y for o in ok])
        warm = None
        if self.warm_start is not None:
            warm = (KernelParams.from_dict(self.warm_start["params"]), self.warm_start["noise_ratio"])
        seed = _derive(self.seed, self.generation, 1) if seed is None else seed
        opts = self.fit_options
        nugget = opts.nugget
        last_exc: Exception | None = None
        while True:
            try:
                return fit(ds, self.space, replace(opts, nugget=nugget), seed, warm_start=warm)
            except (FitError, FactorizationError) as exc:
                last_exc = exc
            nugget = max(nugget * 10.0, 1e-10)
            if nugget > MAX_NUGGET * (1 + 1e-9):
                raise FitError(f"fit failed up to nugget {MAX_NUGGET:g}: {last_exc}")
            log.warning("fit failed, retrying with nugget %g", nugget)

    def _next_generation(self):
        count = min(self.batch_size, self.n_adaptive - self.n_adaptive_done)
        gen = self.generation
        prop_seed = _derive(self.seed, gen, 2)
        try:
            gp = self.fit_model()
        except FitError as exc:
            log.warning("falling back to random proposals: %s", exc)
            proposals = self._random_proposals(count, prop_seed, "fallback_random")
        else:
            self.warm_start = {"params": gp.params.to_dict(), "noise_ratio": gp.noise_ratio}
            y_max = self._y_max(gp)
            opts = replace(self.acq_options, batch_size=count)
            if count == 1:
                proposals = [propose(gp, self.space, y_max, opts, prop_seed)]
            else:
                proposals = propose_batch(gp, self.space, y_max, opts, prop_seed)
            proposals = self._reject_duplicates(proposals, prop_seed)
        self.pending = [
            Pending(_token(self.seed, gen, i), p.config, p.source) for i, p in enumerate(proposals)
        ]

    def _y_max(self, gp: TrainedGP) -> float:
        if self.acq_options.y_max_mode == "posterior":
            mean, _ = posterior(gp, gp.dataset.points)
            return float(np.max(mean))
        return max(o.y for o in self.successful())

    def _random_proposals(self, count, seed, source) -> list[Proposal]:
        rng = np.random.default_rng([seed, 7])
        return [Proposal(sample_uniform(self.space, rng), math.nan, source) for _ in range(count)]

    def _reject_duplicates(self, proposals, seed) -> list[Proposal]:
        # noiseless repeats make the Gram matrix singular; redraw once
        if self.fit_options.learn_noise:
            return proposals
        seen = {o.config.key() for o in self.observations}
        rng = np.random.default_rng([seed, 11])
        out = []
        for p in proposals:
            if p.config.key() in seen:
                p = Proposal(sample_uniform(self.space, rng), math.nan, "duplicate_redraw")
            seen.add(p.config.key())
            out.append(p)
        return out

    # -- ask / tell -------------------------------------------------------

    def suggest(self) -> list[tuple[str, Configuration]]:
        """Unresolved pending configurations, creating the next generation if needed."""
        if not self.pending and not self.done and self.generation > 0:
            self._next_generation()
        return [(p.token, p.config) for p in self.pending if not p.told]

    def tell(self, token: str, y) -> bool:
        """Bind a result; returns True when this completed the generation.

        Non-finite or missing ``y`` records a failed evaluation, which is
        kept in the history but never used for fitting.
        """
        for p in self.pending:
            if p.token == token:
                break
        else:
            if any(o.token == token for o in self.observations):
                raise ProtocolError(f"token {token!r} already told")
            raise ProtocolError(f"unknown token {token!r}")
        if p.told:
            raise ProtocolError(f"token {token!r} already told")
        val = None if y is None else float(y)
        if val is not None and not math.isfinite(val):
            val = None
        p.result, p.told = val, True
        if all(q.told for q in self.pending):
            for q in self.pending:
                self.observations.append(
                    Observation(q.config, q.result, self.generation, q.source, q.token)
                )
            self.pending = []
            self.generation += 1
            return True
        return False

    def step(self, objective: Callable) -> "Study":
        """Evaluate one generation with an in-process objective.

        ``objective(config, rng)`` returns y; exceptions and NaN count as
        failed evaluations.
        """
        items = self.suggest()
        for i, (token, cfg) in enumerate(items):
            rng = np.random.default_rng([self.seed, 3, self.generation, i])
            try:
                y = objective(cfg, rng)
            except Exception as exc:  # objective failures are data
                log.warning("objective failed at %r: %s", cfg, exc)
                y = None
            self.tell(token, y)
        return self

    def run(self, objective: Callable) -> "Study":
        while not self.done:
            self.step(objective)
        return self

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        def obs(o: Observation):
            return {
                "config": o.config.to_record(),
                "y": o.y,
                "generation": o.generation,
                "source": o.source,
                "token": o.token,
            }

        return {
            "schema_version": SCHEMA_VERSION,
            "space": space_to_dict(self.space),
            "objective": self.objective,
            "seed": self.seed,
            "n_init": self.n_init,
            "n_adaptive": self.n_adaptive,
            "mode": "sequential" if self.batch_size == 1 else "batch",
            "batch_size": self.batch_size,
            "fit_options": self.fit_options.to_dict(),
            "acq_options": self.acq_options.to_dict(),
            "generation": self.generation,
            "warm_start": self.warm_start,
            "observations": [obs(o) for o in self.observations],
            "best_so_far": self.best_so_far,
            "pending": [
                {
                    "token": p.token,
                    "config": p.config.to_record(),
                    "source": p.source,
                    "told": p.told,
                    "result": p.result,
                }
                for p in self.pending
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Study":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported study schema_version {version!r}")
        space = space_from_dict(data["space"])
        study = cls(
            space=space,
            n_init=data["n_init"],
            n_adaptive=data["n_adaptive"],
            seed=data["seed"],
            batch_size=data["batch_size"],
            fit_options=FitOptions.from_dict(data["fit_options"]),
            acq_options=AcqOptions.from_dict(data["acq_options"]),
            objective=data.get("objective"),
            generation=data["generation"],
            warm_start=data.get("warm_start"),
        )
        study.observations = [
            Observation(space.from_record(o["config"]), o["y"], o["generation"], o["source"], o["token"])
            for o in data["observations"]
        ]
        study.pending = [
            Pending(p["token"], space.from_record(p["config"]), p["source"], p.get("result"), p["told"])
            for p in data["pending"]
        ]
        for o in study.observations:
            bad = validate(space, o.config)
            if bad:
                raise ValueError(f"stored observation {o.token} is invalid: {bad}")
        return study

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def save(self, path: str) -> None:
        atomic_write(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path: str) -> "Study":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def atomic_write(path: str, text: str) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def init_study(space: SearchSpace, n_init: int, options: dict | None = None, seed: int = 0) -> Study:
    """New study with the initial design queued.  ``options`` keys mirror ``Study.create``."""
    return Study.create(space, n_init=n_init, seed=seed, **(options or {"n_adaptive": 0}))


def step(study: Study, objective: Callable) -> Study:
    return study.step(objective)


def recommend(study: Study) -> tuple[Configuration, float]:
    return study.recommend()

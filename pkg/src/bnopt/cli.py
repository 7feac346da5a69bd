"""Command-line entry point: ``bnopt <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 ask-tell
protocol misuse.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
import yaml

from . import __version__
from .acquisition import AcqOptions
from .bench import get_objective, run_benchmark, OBJECTIVES
from .gp import FitError, FitOptions
from .loop import ProtocolError, Study, atomic_write
from .sensitivity import MEASURE, SensitivityError, curves_to_csv, interaction_effect, main_effect
from .space import SearchSpace, SpaceError, space_from_dict, space_to_dict

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROTOCOL = 0, 2, 3, 4
SECTIONS = {"space", "objective", "run", "fit", "acquisition", "benchmark"}
METHODS = ("bn_sequential", "bn_batch", "random_search")

log = logging.getLogger("bnopt")


class ConfigError(Exception):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field, self.line = field, line


# -- config loading -------------------------------------------------------------


def _line_of(node, path: str | None) -> int | None:
    """1-based line of ``path`` (``a.b.name`` or ``a.b[2]``) in a composed YAML tree."""
    if node is None or not path:
        return None
    best = node.start_mark.line + 1
    for part in path.replace("[", ".[").split("."):
        if not part:
            continue
        nxt = None
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == part:
                    nxt = v
                    break
        elif isinstance(node, yaml.SequenceNode):
            if part.startswith("["):
                idx = int(part.strip("[]"))
                if idx < len(node.value):
                    nxt = node.value[idx]
            else:
                for item in node.value:
                    if isinstance(item, yaml.MappingNode) and any(
                        k.value == "name" and v.value == part for k, v in item.value
                    ):
                        nxt = item
                        break
        if nxt is None:
            break
        node = nxt
        best = node.start_mark.line + 1
    return best


def load_tree(path: str) -> tuple[dict, Any]:
    """Parse a YAML (or JSON) file into plain data plus the node tree for diagnostics."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"parse error: {getattr(exc, 'problem', exc)}", line=line) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return data, node


@dataclass
class RunConfig:
    space: SearchSpace
    objective: str | None = None
    noise_sd: float | None = None
    mode: str = "sequential"
    batch_size: int = 1
    n_init: int = 10
    n_adaptive: int = 50
    seed: int = 0
    output_dir: str = "."
    fit: FitOptions = field(default_factory=FitOptions)
    acquisition: AcqOptions = field(default_factory=AcqOptions)
    methods: tuple = ("bn_sequential", "random_search")
    replicates: int = 20


def _int(section: dict, key: str, prefix: str, default: int, low: int) -> int:
    val = section.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"must be an integer, got {val!r}", f"{prefix}.{key}")
    if val < low:
        raise ConfigError(f"must be >= {low}, got {val}", f"{prefix}.{key}")
    return val


def _section(data: dict, name: str) -> dict:
    sec = data.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError("section must be a mapping", name)
    return sec


def _options(cls, section: dict, prefix: str, skip: tuple = ()):
    known = {f.name for f in fields(cls)} - set(skip)
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown option (known: {sorted(known)})", f"{prefix}.{key}")
    try:
        return cls.from_dict(section)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        culprit = next((k for k in section if k in msg), None)
        raise ConfigError(msg, f"{prefix}.{culprit}" if culprit else prefix) from None


def parse_config(data: dict) -> RunConfig:
    unknown = set(data) - SECTIONS
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown section (known: {sorted(SECTIONS)})", name)

    obj = _section(data, "objective")
    for key in obj:
        if key not in ("builtin", "noise_sd"):
            raise ConfigError("unknown option (known: ['builtin', 'noise_sd'])", f"objective.{key}")
    builtin = obj.get("builtin")
    noise_sd = obj.get("noise_sd")
    if builtin is not None and builtin not in OBJECTIVES:
        raise ConfigError(f"unknown builtin objective {builtin!r}; known: {sorted(OBJECTIVES)}",
                          "objective.builtin")
    if noise_sd is not None:
        if isinstance(noise_sd, bool) or not isinstance(noise_sd, (int, float)) or noise_sd < 0:
            raise ConfigError(f"must be a non-negative number, got {noise_sd!r}", "objective.noise_sd")
        noise_sd = float(noise_sd)

    if "space" in data:
        try:
            space = space_from_dict(data["space"] or {})
        except SpaceError as exc:
            raise ConfigError(str(exc), exc.field) from None
        if builtin is not None and space_to_dict(space) != space_to_dict(get_objective(builtin).space):
            raise ConfigError(f"does not match the space of builtin objective {builtin!r}; omit it",
                              "space")
    elif builtin is not None:
        space = get_objective(builtin).space
    else:
        raise ConfigError("a space section is required without objective.builtin", "space")
    if space.d + len(space.nested) == 0 and not space.branch:
        raise ConfigError("space declares no variables", "space")

    run = _section(data, "run")
    known = {"mode", "batch_size", "n_init", "n_adaptive", "seed", "output_dir"}
    for key in run:
        if key not in known:
            raise ConfigError(f"unknown option (known: {sorted(known)})", f"run.{key}")
    mode = run.get("mode", "sequential")
    if mode not in ("sequential", "batch"):
        raise ConfigError(f"must be 'sequential' or 'batch', got {mode!r}", "run.mode")
    batch_size = _int(run, "batch_size", "run", 1 if mode == "sequential" else 5, 1)
    if mode == "sequential" and batch_size != 1:
        raise ConfigError("sequential mode requires batch_size 1", "run.batch_size")
    output_dir = run.get("output_dir", ".")
    if not isinstance(output_dir, str):
        raise ConfigError("must be a string", "run.output_dir")

    bench = _section(data, "benchmark")
    for key in bench:
        if key not in ("methods", "replicates"):
            raise ConfigError("unknown option (known: ['methods', 'replicates'])", f"benchmark.{key}")
    methods = bench.get("methods", ["bn_sequential", "random_search"])
    if not isinstance(methods, list) or not methods:
        raise ConfigError("must be a non-empty list", "benchmark.methods")
    for i, m in enumerate(methods):
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; known: {list(METHODS)}", f"benchmark.methods[{i}]")

    return RunConfig(
        space=space,
        objective=builtin,
        noise_sd=noise_sd,
        mode=mode,
        batch_size=batch_size,
        n_init=_int(run, "n_init", "run", 10, 2),
        n_adaptive=_int(run, "n_adaptive", "run", 50, 0),
        seed=_int(run, "seed", "run", 0, 0),
        output_dir=output_dir,
        fit=_options(FitOptions, _section(data, "fit"), "fit"),
        acquisition=_options(AcqOptions, _section(data, "acquisition"), "acquisition", skip=("batch_size",)),
        methods=tuple(methods),
        replicates=_int(bench, "replicates", "benchmark", 20, 1),
    )


def read_config(path: str) -> RunConfig:
    data, node = load_tree(path)
    try:
        return parse_config(data)
    except ConfigError as exc:
        if exc.line is None:
            exc.line = _line_of(node, exc.field)
        raise


# -- output helpers --------------------------------------------------------------


@contextlib.contextmanager
def study_lock(study_path: str):
    """Advisory exclusive lock on ``<study>.lock``; blocks until available."""
    lock_path = os.path.abspath(study_path) + ".lock"
    with open(lock_path, "a") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def trace_csv(study: Study) -> str:
    names = list(study.space.names)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["eval_index", "generation", "token", "source", "y", "best_so_far"] + names)
    for i, (o, best) in enumerate(zip(study.observations, study.best_so_far)):
        rec = o.config.to_record()
        writer.writerow([i, o.generation, o.token, o.source, _cell(o.y), _cell(best)]
                        + [_cell(rec.get(n)) for n in names])
    return buf.getvalue()


def recommendation(study: Study) -> dict:
    ok = [(i, o) for i, o in enumerate(study.observations) if o.ok]
    if not ok:
        return {"config": None, "y": None, "rule": "max_observed", "n_evaluations": len(study.observations)}
    i, best = ok[0]
    for j, o in ok[1:]:
        if o.y > best.y:
            i, best = j, o
    return {
        "config": best.config.to_record(),
        "y": best.y,
        "eval_index": i,
        "generation": best.generation,
        "token": best.token,
        "rule": "max_observed",
        "n_evaluations": len(study.observations),
        "n_failed": len(study.observations) - len(ok),
    }


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_study_outputs(study: Study, directory: str) -> None:
    atomic_write(os.path.join(directory, "trace.csv"), trace_csv(study))
    atomic_write(os.path.join(directory, "recommendation.json"), _dumps(recommendation(study)))


def _new_study(cfg: RunConfig) -> Study:
    return Study.create(
        cfg.space,
        n_init=cfg.n_init,
        n_adaptive=cfg.n_adaptive,
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        fit_options=cfg.fit,
        acq_options=cfg.acquisition,
        objective=cfg.objective,
    )


def _objective(cfg: RunConfig):
    return get_objective(cfg.objective, cfg.noise_sd)


# -- commands ---------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = read_config(args.config)
    print(f"ok: {len(cfg.space.names)} variables, {len(cfg.space.combos)} categorical combos, "
          f"mode {cfg.mode}, objective {cfg.objective or 'external'}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = read_config(args.config)
    if cfg.objective is None:
        raise ConfigError("optimize needs a builtin objective; use suggest/tell for external ones",
                          "objective.builtin")
    if args.validate_only:
        return cmd_validate(args)
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    study_path = os.path.join(out, "study.json")
    objective = _objective(cfg)
    with study_lock(study_path):
        study = _new_study(cfg)
        while not study.done:
            study.step(objective)
            study.save(study_path)
        write_study_outputs(study, out)
    rec = recommendation(study)
    print(f"best y {rec['y']!r} at {json.dumps(rec['config'], sort_keys=True)}")
    return EXIT_OK


def _load_study(path: str) -> Study:
    try:
        return Study.load(path)
    except FileNotFoundError:
        raise ConfigError(f"study file {path} does not exist") from None
    except (json.JSONDecodeError, KeyError, ValueError, SpaceError) as exc:
        raise ConfigError(f"study file {path} is not a valid schema_version 1 study: {exc}") from None


def cmd_suggest(args) -> int:
    if args.validate_only:
        if not args.config:
            raise ConfigError("--validate-only needs --config")
        return cmd_validate(args)
    with study_lock(args.study):
        if os.path.exists(args.study):
            study = _load_study(args.study)
        elif args.config:
            study = _new_study(read_config(args.config))
        else:
            raise ConfigError(f"study file {args.study} does not exist; pass --config to create it")
        items = study.suggest()
        study.save(args.study)
    if not items:
        print("study complete", file=sys.stderr)
    for token, cfg in items:
        print(json.dumps({"token": token, "generation": study.generation, "config": cfg.to_record()},
                         sort_keys=True))
    return EXIT_OK


def _parse_y(text: str) -> float | None:
    if text.lower() in ("nan", "none", "null", "fail", "failed"):
        return None
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"y must be a number or 'nan', got {text!r}") from None


def cmd_tell(args) -> int:
    y = _parse_y(args.y)
    with study_lock(args.study):
        study = _load_study(args.study)
        committed = study.tell(args.token, y)
        study.save(args.study)
        if committed:
            write_study_outputs(study, os.path.dirname(os.path.abspath(args.study)))
    if y is None or not math.isfinite(y):
        print(f"warning: token {args.token} recorded as a failed evaluation", file=sys.stderr)
    if committed:
        state = "study complete" if study.done else f"generation {study.generation} ready"
        print(state, file=sys.stderr)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = read_config(args.config)
    if cfg.objective is None:
        raise ConfigError("benchmark needs a builtin objective", "objective.builtin")
    if args.validate_only:
        return cmd_validate(args)
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    objective = _objective(cfg)
    reports = []
    for method in cfg.methods:
        reports.append(run_benchmark(
            method,
            objective,
            n_init=cfg.n_init,
            n_adaptive=cfg.n_adaptive,
            replicates=cfg.replicates,
            seed=cfg.seed,
            batch_size=cfg.batch_size if cfg.batch_size > 1 else 5,
            fit_options=cfg.fit,
            acq_options=cfg.acquisition,
            progress=(lambda msg: print(msg, file=sys.stderr)) if args.progress else None,
        ))
    traces = "".join(
        r.traces_csv() if i == 0 else r.traces_csv().split("\n", 1)[1] for i, r in enumerate(reports)
    )
    summaries = {r.method: r.summary() for r in reports}
    for r in reports:
        summaries[r.method]["recommendations"] = r.recommendations
    paired = {}
    for a in reports:
        for b in reports:
            if a is not b:
                wins = a.final("true") > b.final("true")
                paired[f"{a.method}_beats_{b.method}"] = float(np.mean(wins))
    summary = {
        "objective": cfg.objective,
        "noise_sd": objective.noise_sd,
        "n_init": cfg.n_init,
        "n_adaptive": cfg.n_adaptive,
        "replicates": cfg.replicates,
        "seed": cfg.seed,
        "mean_final_best": {r.method: summaries[r.method]["mean_final_best"] for r in reports},
        "methods": summaries,
        "paired_true_at_recommendation": paired,
    }
    atomic_write(os.path.join(out, "benchmark_traces.csv"), traces)
    atomic_write(os.path.join(out, "benchmark_summary.json"), _dumps(summary))
    for r in reports:
        s = r.summary()
        print(f"{r.method}: median best observed {s['final_best_observed']['median']:.4f}, "
              f"median true at recommendation {s['final_true_at_recommendation']['median']:.4f}")
    return EXIT_OK


def _sensitivity_spec(path: str) -> dict:
    data, node = load_tree(path)
    known = {"seed", "n_mc", "fixed", "main", "interactions"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key (known: {sorted(known)})", key, _line_of(node, key))
    if not data.get("main") and not data.get("interactions"):
        raise ConfigError("needs at least one of 'main' or 'interactions'", line=1)
    return data


def cmd_sensitivity(args) -> int:
    spec = _sensitivity_spec(args.spec)
    seed = spec.get("seed", 0)
    n_mc = spec.get("n_mc", 2000)
    for key, val in (("seed", seed), ("n_mc", n_mc)):
        if isinstance(val, bool) or not isinstance(val, int) or val < 0:
            raise ConfigError(f"must be a non-negative integer, got {val!r}", key)
    fixed = spec.get("fixed") or {}
    with study_lock(args.study):
        study = _load_study(args.study)
    gp = study.fit_model(seed=seed)
    curves = []
    try:
        for item in spec.get("main") or []:
            if isinstance(item, str):
                item = {"var": item}
            curves.append(main_effect(gp, study.space, item["var"], item.get("grid"), n_mc, seed,
                                      {**fixed, **(item.get("fixed") or {})}))
        for item in spec.get("interactions") or []:
            curves.extend(interaction_effect(
                gp, study.space, item["var1"], item["var2"], item.get("grid1"), item.get("levels2"),
                n_mc, seed, {**fixed, **(item.get("fixed") or {})},
            ))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed sensitivity entry: missing or invalid {exc}") from None
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.study)), "effects.csv")
    atomic_write(out, curves_to_csv(curves))
    meta = {
        "measure": MEASURE,
        "surface": "posterior_mean",
        "n_mc": n_mc,
        "seed": seed,
        "n_observations": len(study.successful()),
        "gp": gp.to_dict(),
    }
    atomic_write(os.path.splitext(out)[0] + ".json", _dumps(meta))
    print(f"{len(curves)} curves written to {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnopt", description="Bayesian optimization over "
                                     "branching and nested hyperparameters.")
    parser.add_argument("--version", action="version", version=f"bnopt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log fitting diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run a study on a builtin objective")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.add_argument("--validate-only", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("suggest", help="print pending configurations as JSON lines")
    p.add_argument("study")
    p.add_argument("--config", help="create the study from this config when it does not exist")
    p.add_argument("--validate-only", action="store_true")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("tell", help="report the result for one token")
    p.add_argument("study")
    p.add_argument("token")
    p.add_argument("y", help="observed value, or 'nan' for a failed evaluation")
    p.set_defaults(func=cmd_tell)

    p = sub.add_parser("benchmark", help="replicate study comparison on a builtin objective")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--progress", action="store_true", help="report each replicate on stderr")
    p.add_argument("--validate-only", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("sensitivity", help="main effect and interaction curves of a study's GP")
    p.add_argument("study")
    p.add_argument("spec")
    p.add_argument("--out", help="CSV path (default: effects.csv next to the study)")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("validate", help="check a config file without running")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return parser


def _report(exc: ConfigError, source: str | None) -> str:
    where = ""
    if source:
        where = source + (f":{exc.line}" if exc.line else "") + ": "
    elif exc.line:
        where = f"line {exc.line}: "
    what = f"{exc.field}: " if exc.field else ""
    return f"config error: {where}{what}{exc}"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    source = getattr(args, "config", None) or getattr(args, "spec", None)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_report(exc, source), file=sys.stderr)
        return EXIT_CONFIG
    except SensitivityError as exc:
        print(f"config error: {source}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Configuration-driven experiment runner.

An experiment file is INI text (see ``docs/config.md``). The optional
``[experiment]`` section holds defaults; every ``[run NAME]`` section is one
combination. All combinations are parsed, built and checked before anything
runs or any file is written.
"""

from __future__ import annotations

import configparser
import json
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import envelope_check, estimate_step_moments, fit_rate, fit_variance_model
from .directions import KINDS as DIRECTION_KINDS
from .directions import DirectionDistribution
from .momentum import DecayMode, run_accelerated
from .problems import build_problem
from .sgfd import (
    FIXED,
    ROBBINS_MONRO,
    DivergenceError,
    InfeasibleScheduleError,
    RunConfig,
    StepsizeSchedule,
    StepVariant,
    check_schedule,
    run_reference_sgd,
    run_sgfd,
)
from .streams import replication_rng
from .traceio import write_trace_csv

OPTIMIZERS = ("sgfd", "momentum", "reference-sgd")
WORKERS_ENV = "GRADFREE_WORKERS"
SECTION_PREFIX = "run "

_RUN_KEYS = {
    "problem", "optimizer", "variant", "n_k", "m_k", "schedule", "beta", "sigma", "alpha_bar",
    "directions", "decay", "p", "gamma", "iterations", "replications", "seed", "stride",
    "clip_radius", "m_g", "envelope",
}


class SpecError(ValueError):
    """Invalid experiment file; the message names the section and field."""


@dataclass(frozen=True)
class Combination:
    name: str
    problem: str
    problem_params: dict
    optimizer: str
    variant: StepVariant
    schedule: StepsizeSchedule
    directions: str
    decay: DecayMode
    iterations: int
    replications: int
    seed: int
    stride: int
    clip_radius: float | None = None
    M_G: float = 3.0
    envelope: bool = True


@dataclass
class ExperimentSpec:
    combinations: list = field(default_factory=list)
    output: Path = Path("results")


def _get(section, key, conv, name, default=None, required=False):
    raw = section.get(key)
    if raw is None or raw.strip() == "":
        if required:
            raise SpecError(f"[{name}] missing required field '{key}'")
        return default
    try:
        return conv(raw.strip())
    except (TypeError, ValueError) as exc:
        raise SpecError(f"[{name}] field '{key}': cannot parse {raw!r} ({exc})") from None


def _as_int(text):
    value = float(text)
    if value != int(value):
        raise ValueError("not an integer")
    return int(value)


def _as_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _coerce(text):
    for conv in (_as_int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _parse_combination(name, section, base_dir: Path) -> Combination:
    unknown = sorted(k for k in section if k not in _RUN_KEYS and not k.startswith("problem."))
    if unknown:
        raise SpecError(f"[{name}] unknown field(s): {', '.join(unknown)}")
    problem = _get(section, "problem", str, name, required=True)
    params = {k.split(".", 1)[1]: _coerce(v.strip()) for k, v in section.items() if k.startswith("problem.")}
    if "dataset" in params:
        path = Path(str(params["dataset"]))
        params["dataset"] = str(path if path.is_absolute() else base_dir / path)
    optimizer = _get(section, "optimizer", str, name, "sgfd")
    if optimizer not in OPTIMIZERS:
        raise SpecError(f"[{name}] field 'optimizer': {optimizer!r} is not one of {OPTIMIZERS}")
    try:
        variant = StepVariant(
            _get(section, "variant", str, name, "single-sample"),
            _get(section, "n_k", _as_int, name, 1),
            _get(section, "m_k", _as_int, name, 1),
        )
    except ValueError as exc:
        raise SpecError(f"[{name}] field 'variant': {exc}") from None
    try:
        schedule = StepsizeSchedule(
            _get(section, "schedule", str, name, ROBBINS_MONRO),
            beta=_get(section, "beta", float, name),
            sigma=_get(section, "sigma", float, name),
            alpha_bar=_get(section, "alpha_bar", float, name),
        )
    except ValueError as exc:
        raise SpecError(f"[{name}] field 'schedule': {exc}") from None
    directions = _get(section, "directions", str, name, "uniform-symmetric")
    if directions not in DIRECTION_KINDS:
        raise SpecError(f"[{name}] field 'directions': {directions!r} is not one of {DIRECTION_KINDS}")
    try:
        decay_kind = _get(section, "decay", str, name, "changing")
        decay = DecayMode(decay_kind, p=_get(section, "p", float, name, 2.0),
                          gamma=_get(section, "gamma", float, name))
    except ValueError as exc:
        raise SpecError(f"[{name}] field 'decay': {exc}") from None
    iterations = _get(section, "iterations", _as_int, name, required=True)
    replications = _get(section, "replications", _as_int, name, 1)
    seed = _get(section, "seed", _as_int, name, required=True)
    stride = _get(section, "stride", _as_int, name, 1)
    for field_name, value in (("iterations", iterations), ("replications", replications), ("stride", stride)):
        if value < 1:
            raise SpecError(f"[{name}] field '{field_name}': must be >= 1, got {value}")
    if seed < 0:
        raise SpecError(f"[{name}] field 'seed': must be >= 0, got {seed}")
    if stride > iterations:
        raise SpecError(f"[{name}] field 'stride': {stride} exceeds iterations {iterations}")
    clip = _get(section, "clip_radius", float, name)
    if clip is not None and not clip > 0:
        raise SpecError(f"[{name}] field 'clip_radius': must be positive")
    M_G = _get(section, "m_g", float, name, 3.0)
    if not M_G > 0:
        raise SpecError(f"[{name}] field 'M_G': must be positive")
    return Combination(name, problem, params, optimizer, variant, schedule, directions, decay,
                       iterations, replications, seed, stride, clip, M_G,
                       _get(section, "envelope", _as_bool, name, True))


def parse_spec(text: str, base_dir=".", output=None) -> ExperimentSpec:
    """Parse and validate experiment text; raises :class:`SpecError`."""
    parser = configparser.ConfigParser(interpolation=None, default_section="experiment")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise SpecError(f"malformed experiment file: {exc}") from None
    base_dir = Path(base_dir)
    defaults = parser.defaults()
    out = output or defaults.get("output", "results")
    out = Path(out)
    if not out.is_absolute():
        out = base_dir / out
    combos = []
    for section_name in parser.sections():
        if not section_name.startswith(SECTION_PREFIX):
            raise SpecError(f"[{section_name}] sections must be named 'run <name>'")
        name = section_name[len(SECTION_PREFIX):].strip()
        if not name or any(c in name for c in "/\\ "):
            raise SpecError(f"[{section_name}] run names must be non-empty without spaces or slashes")
        section = {k: v for k, v in parser.items(section_name) if k != "output"}
        combos.append(_parse_combination(name, section, base_dir))
    seen = {}
    for c in combos:
        if c.seed in seen:
            raise SpecError(f"[{c.name}] field 'seed': {c.seed} already used by [{seen[c.seed]}]")
        seen[c.seed] = c.name
    spec = ExperimentSpec(combos, out)
    validate_spec(spec)
    return spec


def load_spec(path, output=None) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read experiment file {path}: {exc}") from None
    return parse_spec(text, path.parent, output)


def _build(combo: Combination):
    problem = build_problem(combo.problem, **combo.problem_params)
    dist = DirectionDistribution(combo.directions, problem.dim)
    config = RunConfig(
        problem=problem, schedule=combo.schedule, iterations=combo.iterations, variant=combo.variant,
        directions=dist, replications=combo.replications, seed=combo.seed, stride=combo.stride,
        clip_radius=combo.clip_radius, M_G=combo.M_G, check_feasibility=combo.optimizer != "reference-sgd",
    )
    return problem, dist, config


def validate_spec(spec: ExperimentSpec) -> None:
    """Build every problem and check every schedule; nothing is run."""
    for combo in spec.combinations:
        try:
            problem, _, config = _build(combo)
        except (ValueError, OSError) as exc:
            raise SpecError(f"[{combo.name}] {exc}") from None
        if combo.clip_radius is not None and combo.optimizer != "momentum":
            raise SpecError(f"[{combo.name}] field 'clip_radius': only momentum runs support clipping")
        if combo.optimizer == "reference-sgd":
            continue
        c = problem.constants
        try:
            check_schedule(combo.schedule, c.l, c.L, combo.M_G, "momentum" if combo.optimizer == "momentum" else "sgfd")
        except InfeasibleScheduleError as exc:
            raise SpecError(f"[{combo.name}] infeasible schedule: {exc}") from None


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _estimate_M(problem, dist, variant, seed: int, probes: int = 8, n: int = 4000) -> float:
    """Quick nonnegative fit of the constant variance level ``M``."""
    rng = replication_rng(seed, 2**31)
    reports = []
    span = max(1.0, float(np.linalg.norm(problem.x0 - problem.constants.x_star)))
    alpha = 1e-3 / max(1.0, problem.constants.L)
    for j in range(probes):
        x = problem.constants.x_star + rng.standard_normal(problem.dim) * span * j / probes
        reports.append(estimate_step_moments(problem, variant, x, alpha, dist, n, rng))
    return fit_variance_model(reports).M


def _execute(combo: Combination) -> dict:
    problem, dist, config = _build(combo)
    started = time.perf_counter()
    runner = {"sgfd": run_sgfd, "momentum": None, "reference-sgd": run_reference_sgd}[combo.optimizer]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            trace = run_accelerated(config, combo.decay) if runner is None else runner(config)
        except DivergenceError as exc:
            return {"name": combo.name, "status": "diverged", "diverged_at": exc.k, "message": str(exc),
                    "trace": None, "seconds": time.perf_counter() - started}
    c = problem.constants
    entry = {"name": combo.name, "status": "ok", "trace": trace}
    try:
        entry["rate_fit"] = fit_rate(trace).as_dict()
    except ValueError as exc:
        entry["rate_fit"] = {"error": str(exc)}
    envelope = None
    if (combo.envelope and combo.optimizer == "sgfd" and combo.schedule.kind in (ROBBINS_MONRO, FIXED)
            and None not in (c.l, c.L, c.F_star)):
        M_hat = _estimate_M(problem, dist, combo.variant, combo.seed)
        envelope = {"M_hat": M_hat, "pass_fraction": envelope_check(trace, problem, combo.schedule, M_hat, dist).pass_fraction}
    entry["envelope"] = envelope
    entry["seconds"] = time.perf_counter() - started
    return entry


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SpecError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SpecError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def _metadata(trace) -> dict:
    meta = dict(trace.metadata)
    meta.pop("wall_clock_seconds", None)
    return meta


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> dict:
    """Run every combination and write CSVs, ``report.json`` and ``timing.json``.

    ``report.json`` depends only on the spec and seeds, so reruns are
    byte-identical; wall-clock times go to ``timing.json``.
    """
    validate_spec(spec)
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(spec.combinations) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, spec.combinations))
    else:
        results = [_execute(c) for c in spec.combinations]

    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    entries, timing = [], {}
    for combo, res in zip(spec.combinations, results):
        timing[combo.name] = res.pop("seconds")
        trace = res.pop("trace")
        if trace is not None:
            csv_name = f"{combo.name}.csv"
            write_trace_csv(trace, out / csv_name)
            res["csv"] = csv_name
            res["rows"] = len(trace)
            res["metadata"] = _metadata(trace)
        else:
            res["csv"] = None
        res["optimizer"] = combo.optimizer
        entries.append(res)
    report = {"library_version": __version__, "combinations": entries}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report

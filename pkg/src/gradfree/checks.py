"""Named numerical checks behind ``gradfree verify`` and the acceptance tests.

Each ``criterion_*`` function runs one acceptance experiment at full scale
and returns a :class:`CheckResult`; thresholds are keyword arguments so the
defaults are the pinned acceptance values. :func:`verify_suite` bundles the
cheap invariant checks (``fast``) or those plus every criterion (``full``).
"""

from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    BoundParams,
    bound_A_sequence,
    bound_B_sequence,
    envelope_check,
    estimate_step_moments,
    euler_sine_limit,
    fit_power_law,
    fit_rate,
    fit_variance_model,
    fixed_step_B_limit,
    schedule_bounds,
    unbiasedness_profile,
)
from .directions import NORMAL, UNIFORM, DirectionDistribution, empirical_moments, reconstruction_error, third_moment_bound, third_moment_norm
from .momentum import DecayMode, MomentumState, fixed_decay_ratio, momentum_variance_profile, run_accelerated, update_direction
from .problems import conditioned_quadratic, rosenbrock_like
from .sgfd import RunConfig, StepsizeSchedule, StepVariant, feasible_sigma, run_sgfd
from .streams import replication_rng
from .traceio import trace_to_csv

MASTER_SEEDS = (0, 1, 2, 3, 4)
RATE_DIM = 10
RATE_CONDITION = 10.0
RATE_NOISE = 1.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: str
    threshold: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0
    artifacts: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark}  {self.name}: {self.statistic} (threshold {self.threshold}) [{self.seconds:.1f}s]"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - start
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# shared experiment setups
# ---------------------------------------------------------------------------


def rate_problem(master_seed: int):
    """d=10 quadratic, eigenvalues 1..10, unit noise, minimizer drawn from the seed."""
    return conditioned_quadratic(RATE_DIM, RATE_CONDITION, RATE_NOISE, master_seed)


def rate_schedule(beta_l: float, problem, M_G: float = 3.0) -> StepsizeSchedule:
    c = problem.constants
    beta = beta_l / c.l
    return StepsizeSchedule.robbins_monro(beta, feasible_sigma(beta, c.L, M_G))


def sgfd_rate_config(master_seed: int, iterations=10_000, replications=50, stride=10) -> RunConfig:
    p = rate_problem(master_seed)
    return RunConfig(p, rate_schedule(2.0, p), iterations, replications=replications,
                     seed=master_seed, stride=stride)


def momentum_rate_config(master_seed: int, iterations=10_000, replications=50, stride=10) -> RunConfig:
    p = rate_problem(master_seed)
    return RunConfig(p, rate_schedule(5.0, p), iterations, replications=replications,
                     seed=master_seed, stride=stride)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


@_timed
def criterion_direction_laws(n: int = 1_000_000, dims=(2, 8, 32), seed: int = 11,
                             cov_tol: float = 0.02, recon_tol: float = 0.01,
                             factory=DirectionDistribution) -> CheckResult:
    """Mean, unit covariance, reconstruction and third-moment bound for both laws."""
    failures, worst = [], {"mean": 0.0, "cov": 0.0, "recon": 0.0, "third_ratio": 0.0}
    mean_tol = 4.0 / math.sqrt(n)
    for i, kind in enumerate((UNIFORM, NORMAL)):
        for d in dims:
            dist = factory(kind, d)
            rng = replication_rng(seed, 100 * i + d)
            mean, second = empirical_moments(dist, n, rng)
            cov = second - np.outer(mean, mean)
            m_err = float(np.max(np.abs(mean)))
            c_err = float(np.max(np.abs(cov - np.eye(d))))
            e1 = np.zeros(d)
            e1[0] = 1.0
            r_err = reconstruction_error(dist, e1, n, rng)
            t_ratio = third_moment_norm(dist, n, rng) / (third_moment_bound(DirectionDistribution(kind, d)) * (1 + 5 / math.sqrt(n)))
            worst = {"mean": max(worst["mean"], m_err / mean_tol), "cov": max(worst["cov"], c_err),
                     "recon": max(worst["recon"], r_err), "third_ratio": max(worst["third_ratio"], t_ratio)}
            for label, bad in (("mean", m_err >= mean_tol), ("covariance", c_err > cov_tol),
                               ("reconstruction", r_err >= recon_tol), ("third moment", t_ratio > 1.0)):
                if bad:
                    failures.append(f"{kind} d={d}: {label}")
    stat = (f"max|mean|/(4/sqrt n)={worst['mean']:.3f}, max cov err={worst['cov']:.4f}, "
            f"max recon err={worst['recon']:.4f}, max third/bound={worst['third_ratio']:.2e}")
    return CheckResult("C1 direction laws", not failures, stat,
                       f"mean<4/sqrt(n), cov<={cov_tol}, recon<{recon_tol}, third<=bound",
                       {"failures": failures, **worst})


@_timed
def criterion_unbiasedness(n: int = 1_000_000, alphas=(0.1, 0.05, 0.025, 0.0125), seed: int = 12,
                           min_order: float = 0.8) -> CheckResult:
    """Deviation of ``mean(s/alpha)`` from ``-grad F`` shrinks at least like ``alpha**0.8``."""
    p = rate_problem(0)
    dist = DirectionDistribution(UNIFORM, p.dim)
    prof = unbiasedness_profile(p, StepVariant(), p.x0, alphas, dist, n, replication_rng(seed, 0))
    within = bool(np.all(prof.deviation <= prof.bound + 4 * prof.standard_error))
    passed = prof.monotone and prof.order >= min_order and within
    return CheckResult(
        "C2 asymptotic unbiasedness", passed,
        f"order={prof.order:.3f}, deviations={np.array2string(prof.deviation, precision=3)}",
        f"order>={min_order}, strictly decreasing, <= bound+4SE",
        {"alphas": prof.alphas.tolist(), "deviation": prof.deviation.tolist(),
         "naive_deviation": prof.naive_deviation.tolist(), "bound": prof.bound.tolist(),
         "standard_error": prof.standard_error.tolist(), "monotone": prof.monotone, "within_bound": within},
    )


@_timed
def criterion_sgfd_rate(seeds=MASTER_SEEDS, iterations=10_000, replications=50,
                        slope_range=(-1.35, -0.75), min_pass=4) -> CheckResult:
    slopes, traces = [], {}
    for s in seeds:
        tr = run_sgfd(sgfd_rate_config(s, iterations, replications))
        traces[s] = tr
        slopes.append(fit_rate(tr).slope)
    ok = [slope_range[0] <= v <= slope_range[1] for v in slopes]
    return CheckResult(
        "C3 SGFD rate", sum(ok) >= min_pass,
        f"slopes={[round(v, 3) for v in slopes]}, in range {sum(ok)}/{len(ok)}",
        f"slope in {list(slope_range)} for >= {min_pass} seeds",
        {"slopes": slopes, "seeds": list(seeds)}, artifacts={"traces": traces},
    )


@_timed
def criterion_momentum_rate(seeds=MASTER_SEEDS, iterations=10_000, replications=50,
                            slope_range=(-2.4, -1.2), min_gain=0.3, min_pass=4,
                            sgfd_slopes=None, p: float = 2.0) -> CheckResult:
    """``sgfd_slopes`` may reuse the matched plain runs of :func:`criterion_sgfd_rate`."""
    slopes = []
    for s in seeds:
        slopes.append(fit_rate(run_accelerated(momentum_rate_config(s, iterations, replications),
                                               DecayMode.changing(p))).slope)
    if sgfd_slopes is None:
        sgfd_slopes = [fit_rate(run_sgfd(sgfd_rate_config(s, iterations, replications))).slope for s in seeds]
    ok = [slope_range[0] <= m <= slope_range[1] and m <= g - min_gain for m, g in zip(slopes, sgfd_slopes)]
    return CheckResult(
        "C4 momentum rate", sum(ok) >= min_pass,
        f"momentum slopes={[round(v, 3) for v in slopes]}, sgfd={[round(v, 3) for v in sgfd_slopes]}, "
        f"pass {sum(ok)}/{len(ok)}",
        f"slope in {list(slope_range)} and <= sgfd slope - {min_gain} for >= {min_pass} seeds",
        {"momentum_slopes": slopes, "sgfd_slopes": list(sgfd_slopes), "per_seed_pass": ok},
    )


@_timed
def criterion_variance_decay(iterations=10_000, replications=400, seed: int = 15,
                             slope_range=(-1.35, -0.65), gamma: float = 0.9, factor: float = 2.0,
                             window=(100, 10_000)) -> CheckResult:
    """Frozen-point variance of ``m_k``: ``O(1/k)`` for changing decay, a plateau for fixed."""
    p = rate_problem(0)
    sched = rate_schedule(5.0, p)
    record = np.unique(np.geomspace(1, iterations, 80).astype(int))
    details, ok = {}, True
    for pow_ in (1.0, 2.0):
        prof = momentum_variance_profile(p, sched, DecayMode.changing(pow_), iterations, replications,
                                         seed=seed, record=record)
        slope = fit_power_law(prof.k, prof.var_mk, window).slope
        details[f"slope_p{pow_:g}"] = slope
        ok &= slope_range[0] <= slope <= slope_range[1]
    prof = momentum_variance_profile(p, sched, DecayMode.fixed(gamma), iterations, replications,
                                     seed=seed, record=record)
    late = prof.k >= iterations / 10
    level = float(np.mean(prof.var_mk[late]) / prof.var_g)
    target = fixed_decay_ratio(gamma)
    details.update({"fixed_ratio": level, "fixed_target": target})
    ok &= target / factor <= level <= target * factor
    return CheckResult(
        "C5 momentum variance decay", bool(ok),
        f"slope p=1 {details['slope_p1']:.3f}, p=2 {details['slope_p2']:.3f}; "
        f"fixed gamma plateau/V[g]={level:.4f} vs {target:.4f}",
        f"slopes in {list(slope_range)}, plateau within x{factor:g}", details,
    )


def _brute_A(beta, sigma, l, k_max, div=1):
    return np.cumprod(1.0 - beta * l / div / (np.arange(1, k_max + 1) + sigma))


def _brute_B(beta, sigma, l, k_max, div=1):
    out = np.empty(k_max)
    b = 0.0
    for k in range(1, k_max + 1):
        a = beta / (k + sigma)
        b = (1.0 - a * l / div) * b + a * a
        out[k - 1] = b
    return out


@_timed
def criterion_bounds(n_sets: int = 20, k_max: int = 10_000, seed: int = 16, rtol: float = 1e-10,
                     fixed_tol: float = 1e-6, euler_tol: float = 1e-3, k_limit: int = 1_000_000) -> CheckResult:
    rng = replication_rng(seed, 0)
    worst_a = worst_b = 0.0
    for _ in range(n_sets):
        l = float(rng.uniform(0.1, 2.0))
        beta = float(rng.uniform(1.05, 6.0)) / l
        sigma = float(rng.uniform(0.5, 60.0))
        div = int(rng.integers(1, 3))
        params = BoundParams(beta, sigma, l, k_max, div)
        ra = _brute_A(beta, sigma, l, k_max, div)
        rb = _brute_B(beta, sigma, l, k_max, div)
        worst_a = max(worst_a, float(np.max(np.abs(bound_A_sequence(params) / ra - 1))))
        worst_b = max(worst_b, float(np.max(np.abs(bound_B_sequence(params) / rb - 1))))
    B_fixed = schedule_bounds(np.full(k_limit, 0.1), 1.0)[1][-1]
    fixed_err = abs(B_fixed - fixed_step_B_limit(0.1, 1.0))
    A_euler = schedule_bounds(0.25 / np.arange(1, k_limit + 1, dtype=float) ** 2, 1.0)[0][-1]
    euler_err = abs(A_euler - euler_sine_limit(0.25))
    ok = worst_a <= rtol and worst_b <= rtol and fixed_err <= fixed_tol and euler_err <= euler_tol
    return CheckResult(
        "C6 bound machinery", ok,
        f"A rel err={worst_a:.2e}, B rel err={worst_b:.2e}, fixed-step |B-a/l|={fixed_err:.2e}, "
        f"Euler |A-sinc|={euler_err:.2e}",
        f"rel<={rtol:g}, fixed<={fixed_tol:g}, Euler<={euler_tol:g}",
        {"A_rel": worst_a, "B_rel": worst_b, "fixed_err": fixed_err, "euler_err": euler_err},
    )


def fit_rate_variance_model(problem, dist, seed: int = 17, probes: int = 12, n: int = 20_000,
                            alphas=(1e-3, 3e-3)):
    """``(M_hat, M_V_hat)`` from probes at growing distance from the minimizer."""
    rng = replication_rng(seed, 0)
    reports = []
    for j in range(probes):
        x = problem.constants.x_star + rng.standard_normal(problem.dim) * (j / 4.0)
        for a in alphas:
            reports.append(estimate_step_moments(problem, StepVariant(), x, a, dist, n, rng))
    return fit_variance_model(reports), reports


@_timed
def criterion_envelope(traces=None, min_fraction: float = 0.95) -> CheckResult:
    """Envelope on the plain-SGFD rate runs (reused from criterion 3 when given)."""
    if traces is None:
        traces = {s: run_sgfd(sgfd_rate_config(s)) for s in MASTER_SEEDS}
    fractions = {}
    M_hats = {}
    for s, tr in traces.items():
        p = rate_problem(s)
        dist = DirectionDistribution(UNIFORM, p.dim)
        model, _ = fit_rate_variance_model(p, dist, seed=1000 + s)
        M_hats[s] = model.M
        fractions[s] = envelope_check(tr, p, rate_schedule(2.0, p), model.M, dist).pass_fraction
    worst = min(fractions.values())
    return CheckResult(
        "C7 envelope", worst >= min_fraction,
        f"min pass fraction={worst:.3f} over {len(fractions)} runs",
        f">= {min_fraction}", {"pass_fraction": fractions, "M_hat": M_hats},
    )


def nonconvex_config(master_seed: int, iterations=100_000, replications=20, stride=10,
                     noise_sd=0.1, beta=10.0) -> RunConfig:
    p = rosenbrock_like(2, noise_sd)
    sched = StepsizeSchedule.robbins_monro(beta, feasible_sigma(beta, p.constants.L))
    return RunConfig(p, sched, iterations, replications=replications, seed=master_seed, stride=stride)


@_timed
def criterion_nonconvex(seeds=MASTER_SEEDS, iterations=100_000, replications=20,
                        threshold: float = 1e-2, min_pass=4) -> CheckResult:
    finals, ok = [], []
    for s in seeds:
        # no strong convexity here, so the beta check is skipped by design
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            tr = run_sgfd(nonconvex_config(s, iterations, replications))
        running = np.minimum.accumulate(tr.mean_grad_sq)
        finals.append(float(running[-1]))
        ok.append(bool(np.all(np.diff(running) <= 0) and running[-1] < threshold))
    return CheckResult(
        "C8 nonconvex gradient trend", sum(ok) >= min_pass,
        f"final running-min E|grad F|^2={[f'{v:.2e}' for v in finals]}, pass {sum(ok)}/{len(ok)}",
        f"< {threshold:g} for >= {min_pass} seeds", {"final": finals, "per_seed_pass": ok},
    )


@_timed
def criterion_determinism(reference=None) -> CheckResult:
    """Rerun a rate experiment and a small harness batch; compare bytes."""
    from .harness import parse_spec, run_experiment

    first = trace_to_csv(reference if reference is not None else run_sgfd(sgfd_rate_config(0)))
    second = trace_to_csv(run_sgfd(sgfd_rate_config(0)))
    same_trace = first == second
    text = (
        "[run plain]\nproblem = quadratic\nproblem.dimension = 4\nproblem.condition = 4\n"
        "problem.noise_sd = 0.5\noptimizer = sgfd\nbeta = 2\nsigma = 23\niterations = 400\n"
        "replications = 3\nseed = 1\nstride = 4\n\n"
        "[run accel]\nproblem = quadratic\nproblem.dimension = 4\nproblem.condition = 4\n"
        "problem.noise_sd = 0.5\noptimizer = momentum\nbeta = 5\nsigma = 59\niterations = 400\n"
        "replications = 3\nseed = 2\nstride = 4\n"
    )
    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(2):
            spec = parse_spec(text, tmp, output=Path(tmp) / f"out{i}")
            run_experiment(spec, workers=1)
            outputs.append({f.name: f.read_bytes() for f in sorted(spec.output.iterdir()) if f.name != "timing.json"})
    same_batch = outputs[0] == outputs[1]
    return CheckResult(
        "C9 determinism", same_trace and same_batch,
        f"rate-run CSV identical={same_trace}, harness files identical={same_batch}",
        "byte-identical", {"files": sorted(outputs[0])},
    )


# ---------------------------------------------------------------------------
# fast invariants
# ---------------------------------------------------------------------------


def _fast_directions(factory, n=100_000, seed=21):
    out = []
    for i, kind in enumerate((UNIFORM, NORMAL)):
        for d in (2, 8):
            dist = factory(kind, d)
            rng = replication_rng(seed, 10 * i + d)
            mean, second = empirical_moments(dist, n, rng)
            cov = second - np.outer(mean, mean)
            m_err = float(np.max(np.abs(mean)))
            c_err = float(np.max(np.abs(cov - np.eye(d))))
            out.append(CheckResult(f"directions.zero_mean[{kind},d={d}]", m_err < 4 / math.sqrt(n),
                                   f"{m_err:.2e}", f"< {4 / math.sqrt(n):.2e}"))
            out.append(CheckResult(f"directions.unit_covariance[{kind},d={d}]", c_err <= 0.02,
                                   f"{c_err:.4f}", "<= 0.02"))
            e1 = np.eye(d)[0]
            r_err = reconstruction_error(dist, e1, n, rng)
            tol = 4 * math.sqrt((d + dist.m4) / n)
            out.append(CheckResult(f"directions.reconstruction[{kind},d={d}]", r_err < tol,
                                   f"{r_err:.4f}", f"< {tol:.4f}"))
            bound = third_moment_bound(DirectionDistribution(kind, d)) * (1 + 5 / math.sqrt(n))
            t = third_moment_norm(dist, n, rng)
            out.append(CheckResult(f"directions.third_moment[{kind},d={d}]", t <= bound,
                                   f"{t:.4f}", f"<= {bound:.3f}"))
    return out


def _fast_momentum(update_fn):
    out = []
    worst = 0.0
    for p in (0.5, 1.0, 2.0, 4.0):
        state = MomentumState(DecayMode.changing(p))
        for _ in range(1000):
            m = update_fn(state, np.ones(1), 1.0)
            worst = max(worst, abs(float(m[0]) - 1.0))
    out.append(CheckResult("momentum.weight_sum", worst <= 1e-12, f"max|sum w - 1|={worst:.2e}", "<= 1e-12"))
    rng = replication_rng(22, 0)
    worst = 0.0
    for p in (0.5, 1.0, 2.0, 4.0):
        steps = rng.standard_normal((200, 3))
        alphas = 1.0 / (np.arange(1, 201) + 5.0)
        state = MomentumState(DecayMode.changing(p))
        for k in range(1, 201):
            m = update_fn(state, steps[k - 1], alphas[k - 1])
        w = np.arange(1, 201, dtype=float) ** p
        direct = (w[:, None] * steps / alphas[:, None]).sum(0) / w.sum()
        worst = max(worst, float(np.max(np.abs(m - direct) / np.abs(direct))))
    out.append(CheckResult("momentum.closed_form", worst <= 1e-10, f"max rel err={worst:.2e}", "<= 1e-10"))
    p = rate_problem(0)
    cfg = RunConfig(p, rate_schedule(5.0, p), 1, replications=3, seed=5)
    a = run_sgfd(cfg)
    b = run_accelerated(cfg)
    same = a.mean_gap[0] == b.mean_gap[0] and a.mean_grad_sq[0] == b.mean_grad_sq[0]
    out.append(CheckResult("momentum.first_iteration", bool(same), f"identical={same}", "bit-exact"))
    return out


def _fast_analysis():
    out = []
    worst = 0.0
    for beta, sigma, l in ((2.0, 5.0, 1.0), (1.5, 1.0, 1.0), (8.0, 30.0, 0.5)):
        params = BoundParams(beta, sigma, l, 2000)
        worst = max(worst, float(np.max(np.abs(bound_A_sequence(params) / _brute_A(beta, sigma, l, 2000) - 1))),
                    float(np.max(np.abs(bound_B_sequence(params) / _brute_B(beta, sigma, l, 2000) - 1))))
    out.append(CheckResult("analysis.bound_oracles", worst <= 1e-10, f"max rel err={worst:.2e}", "<= 1e-10"))
    k = np.arange(1, 1001, dtype=float)
    s1 = fit_power_law(k, 7 / k).slope
    s2 = fit_power_law(k, 3 / k**2).slope
    err = max(abs(s1 + 1), abs(s2 + 2))
    out.append(CheckResult("analysis.exact_power_law", err <= 1e-6, f"slope err={err:.1e}", "<= 1e-6"))
    p = rate_problem(0)
    dist = DirectionDistribution(UNIFORM, p.dim)
    rep = estimate_step_moments(p, StepVariant(), p.x0, 0.01, dist, 20_000, replication_rng(23, 0))
    resid = abs(rep.identity_residual) / rep.second_moment
    out.append(CheckResult("analysis.mean_variance_identity", resid <= 1e-12, f"rel residual={resid:.1e}", "<= 1e-12"))
    return out


def _fast_determinism():
    p = rate_problem(0)
    cfg = RunConfig(p, rate_schedule(2.0, p), 200, replications=4, seed=9, stride=5)
    same = trace_to_csv(run_sgfd(cfg)) == trace_to_csv(run_sgfd(cfg))
    return [CheckResult("sgfd.determinism", same, f"identical={same}", "byte-identical")]


def fast_checks(direction_factory=DirectionDistribution, update_fn=update_direction):
    return (_fast_directions(direction_factory) + _fast_momentum(update_fn)
            + _fast_analysis() + _fast_determinism())


def acceptance_checks(direction_factory=DirectionDistribution):
    c3 = criterion_sgfd_rate()
    traces = c3.artifacts["traces"]
    return [
        criterion_direction_laws(factory=direction_factory),
        criterion_unbiasedness(),
        c3,
        criterion_momentum_rate(sgfd_slopes=c3.details["slopes"]),
        criterion_variance_decay(),
        criterion_bounds(),
        criterion_envelope(traces),
        criterion_nonconvex(),
        criterion_determinism(traces[0]),
    ]


@dataclass
class VerifyReport:
    level: str
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self):
        return [r.line() for r in self.results]

    def failures(self):
        return [r for r in self.results if not r.passed]


def verify_suite(level: str = "fast", direction_factory=DirectionDistribution,
                 update_fn=update_direction) -> VerifyReport:
    """Run the invariant checks; ``full`` adds every acceptance criterion.

    ``direction_factory(kind, dim)`` and ``update_fn(state, step, alpha)``
    can be swapped for mutated implementations to confirm the checks bite.
    """
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    results = fast_checks(direction_factory, update_fn)
    if level == "full":
        results += acceptance_checks(direction_factory)
    return VerifyReport(level, results)

"""Stochastic gradient-free descent.

One iteration moves ``x`` by a finite difference of sampled losses taken
along a random direction ``zeta``::

    s = (f(x, xi) - f(x + alpha * zeta, xi)) * zeta
    x <- x + s

Six constructions of ``s`` are available (see :class:`StepVariant`). Runs are
vectorized over replications; replication ``r`` of a run seeded with ``seed``
owns the stream :func:`gradfree.streams.replication_rng(seed, r)`, so every
replication is reproducible in isolation.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .directions import DirectionDistribution
from .problems import StochasticProblem
from .streams import draw_blocks, open_uniform, replication_rng

SINGLE = "single-sample"
MINIBATCH = "minibatch-shared-direction"
NESTED = "nested-batch"
PAIRED = "paired-sample-direction"
FULL_SINGLE = "full-objective-single"
FULL_BATCH = "full-objective-batch"
VARIANT_KINDS = (SINGLE, MINIBATCH, NESTED, PAIRED, FULL_SINGLE, FULL_BATCH)

ROBBINS_MONRO = "robbins-monro"
FIXED = "fixed"
INVERSE_SQUARE = "inverse-square"
SCHEDULE_KINDS = (ROBBINS_MONRO, FIXED, INVERSE_SQUARE)

DEFAULT_M_G = 3.0
DIVERGENCE_FACTOR = 1e6
_FEAS_RTOL = 1e-12


class InfeasibleScheduleError(ValueError):
    """A stepsize schedule violates a convergence condition."""


class DivergenceError(RuntimeError):
    """The objective blew up; ``k`` is the first offending iteration."""

    def __init__(self, k: int, value: float, threshold: float):
        self.k = int(k)
        self.value = float(value)
        self.threshold = float(threshold)
        super().__init__(
            f"diverged at iteration k={self.k}: F(x_k)={self.value!r} exceeds {self.threshold!r}"
        )


# ---------------------------------------------------------------------------
# step variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepVariant:
    """Construction of the stochastic step.

    ``single-sample``: one ``xi``, one ``zeta``.
    ``minibatch-shared-direction``: ``n_k`` samples share one ``zeta``.
    ``nested-batch``: ``n_k`` directions, each with ``m_k`` own samples.
    ``paired-sample-direction``: ``n_k`` (sample, direction) pairs.
    ``full-objective-single``: exact ``F`` along one ``zeta``.
    ``full-objective-batch``: exact ``F`` along ``n_k`` directions.
    """

    kind: str = SINGLE
    n_k: int = 1
    m_k: int = 1

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown step variant {self.kind!r}; expected one of {VARIANT_KINDS}")
        for name in ("n_k", "m_k"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.kind in (SINGLE, FULL_SINGLE) and self.n_k != 1:
            raise ValueError(f"{self.kind} uses exactly one sample; got n_k={self.n_k}")
        if self.kind != NESTED and self.m_k != 1:
            raise ValueError(f"m_k applies to {NESTED} only; got m_k={self.m_k} for {self.kind}")

    @property
    def uses_objective(self) -> bool:
        return self.kind in (FULL_SINGLE, FULL_BATCH)

    def layout(self) -> tuple[int, int, int]:
        """``(directions, sample groups, samples per group)`` of one step."""
        n, m = self.n_k, self.m_k
        return {
            SINGLE: (1, 1, 1),
            MINIBATCH: (1, 1, n),
            NESTED: (n, n, m),
            PAIRED: (n, n, 1),
            FULL_SINGLE: (1, 0, 0),
            FULL_BATCH: (n, 0, 0),
        }[self.kind]

    def n_uniforms(self, problem: StochasticProblem, dist: DirectionDistribution) -> int:
        """Uniform draws consumed by one step: directions first, then noise."""
        nd, groups, per = self.layout()
        return nd * dist.n_uniforms + groups * per * problem.noise_width


def compute_step(variant: StepVariant, problem: StochasticProblem, dist: DirectionDistribution,
                 x, alpha, u) -> np.ndarray:
    """Step from pre-drawn uniforms.

    ``x`` has shape ``(..., d)``, ``alpha`` is a scalar or shape ``(...)`` and
    ``u`` has shape ``(..., variant.n_uniforms(problem, dist))``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    lead = u.shape[:-1]
    d = problem.dim
    nd, groups, per = variant.layout()
    if u.shape[-1] != variant.n_uniforms(problem, dist):
        raise ValueError(f"expected {variant.n_uniforms(problem, dist)} uniforms per step, got {u.shape[-1]}")
    zeta = dist.from_uniform(u[..., : nd * d].reshape(lead + (nd, d)))
    a = np.asarray(alpha, dtype=float)[..., None, None]
    shifted = x[..., None, :] + a * zeta
    if variant.uses_objective:
        diff = problem.objective(x)[..., None] - problem.objective(shifted)
    else:
        xi = problem.noise_from_uniform(
            u[..., nd * d:].reshape(lead + (groups, per, problem.noise_width))
        )
        base = problem.sample_loss(x[..., None, None, :], xi)
        moved = problem.sample_loss(shifted[..., :, None, :], xi)
        diff = (base - moved).mean(axis=-1)
    return (diff[..., None] * zeta).mean(axis=-2)


def stochastic_step(variant: StepVariant, problem: StochasticProblem, x, alpha: float,
                    dist: DirectionDistribution, rng: np.random.Generator) -> np.ndarray:
    """One step at ``x`` with fresh ``(xi, zeta)`` drawn from ``rng``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    if dist.dim != problem.dim:
        raise ValueError(f"direction dimension {dist.dim} does not match problem dimension {problem.dim}")
    s = compute_step(variant, problem, dist, x, alpha, open_uniform(rng, variant.n_uniforms(problem, dist)))
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite loss evaluation while forming the step")
    return s


# ---------------------------------------------------------------------------
# stepsizes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepsizeSchedule:
    """Stepsize rule.

    ``robbins-monro``: ``beta / (k + sigma)``; ``fixed``: ``alpha_bar``;
    ``inverse-square``: ``beta / k**2`` (diagnostic only, not summable).
    """

    kind: str = ROBBINS_MONRO
    beta: float | None = None
    sigma: float | None = None
    alpha_bar: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        need = {ROBBINS_MONRO: ("beta", "sigma"), FIXED: ("alpha_bar",), INVERSE_SQUARE: ("beta",)}[self.kind]
        for name in need:
            value = getattr(self, name)
            if value is None or not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{self.kind} schedule needs {name} > 0, got {value!r}")

    @classmethod
    def robbins_monro(cls, beta: float, sigma: float) -> "StepsizeSchedule":
        return cls(ROBBINS_MONRO, beta=beta, sigma=sigma)

    @classmethod
    def fixed(cls, alpha_bar: float) -> "StepsizeSchedule":
        return cls(FIXED, alpha_bar=alpha_bar)

    @classmethod
    def inverse_square(cls, beta: float) -> "StepsizeSchedule":
        return cls(INVERSE_SQUARE, beta=beta)

    def alpha(self, k):
        """``alpha_k`` for scalar or array ``k >= 1``."""
        kk = np.asarray(k, dtype=float)
        if np.any(kk < 1):
            raise ValueError("iteration index must be >= 1")
        if self.kind == ROBBINS_MONRO:
            out = self.beta / (kk + self.sigma)
        elif self.kind == FIXED:
            out = np.full(kk.shape, float(self.alpha_bar))
        else:
            out = self.beta / (kk * kk)
        return float(out) if out.ndim == 0 else out

    def as_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "sigma": self.sigma, "alpha_bar": self.alpha_bar}


def next_stepsize(schedule: StepsizeSchedule, k: int) -> float:
    if int(k) != k or k < 1:
        raise ValueError(f"k must be an integer >= 1, got {k!r}")
    return schedule.alpha(k)


def feasible_sigma(beta: float, L: float, M_G: float = DEFAULT_M_G) -> float:
    """Smallest ``sigma`` with ``beta / (1 + sigma) <= 1 / (L * M_G)``."""
    sigma = beta * L * M_G - 1.0
    if sigma <= 0:
        raise InfeasibleScheduleError(
            f"beta*L*M_G = {beta * L * M_G!r} <= 1 leaves no positive sigma; increase beta"
        )
    return sigma


def check_schedule(schedule: StepsizeSchedule, l: float | None = None, L: float | None = None,
                   M_G: float = DEFAULT_M_G, method: str = "sgfd") -> list[str]:
    """Validate a schedule against problem constants.

    ``method`` is ``"sgfd"`` (``beta > 1/l``) or ``"momentum"``
    (``beta > 4/l``). Both require ``alpha_1 <= 1/(L*M_G)``. Raises
    :class:`InfeasibleScheduleError` naming the violated inequality and
    returns warnings for checks skipped because a constant is unknown.
    """
    if method not in ("sgfd", "momentum"):
        raise ValueError(f"method must be 'sgfd' or 'momentum', got {method!r}")
    notes = []
    if schedule.kind == INVERSE_SQUARE:
        return ["inverse-square schedule is diagnostic only; feasibility not checked"]
    if schedule.kind == ROBBINS_MONRO:
        factor = 1.0 if method == "sgfd" else 4.0
        if l is None:
            notes.append("strong-convexity modulus l unknown; beta lower bound not checked")
        elif not schedule.beta > factor / l:
            raise InfeasibleScheduleError(
                f"beta = {schedule.beta!r} <= {factor:g}/l = {factor / l!r}: "
                f"the {method} schedule needs beta > {factor:g}/l"
            )
    alpha1 = schedule.alpha(1)
    if L is None:
        notes.append("gradient Lipschitz constant L unknown; alpha_1 upper bound not checked")
    else:
        limit = 1.0 / (L * M_G)
        if alpha1 > limit * (1.0 + _FEAS_RTOL):
            raise InfeasibleScheduleError(
                f"alpha_1 = {alpha1!r} > 1/(L*M_G) = {limit!r} with L={L!r}, M_G={M_G!r}: "
                "the first stepsize must satisfy alpha_1 <= 1/(L*M_G)"
            )
    return notes


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; equal configs give equal traces."""

    problem: StochasticProblem
    schedule: StepsizeSchedule
    iterations: int
    variant: StepVariant = StepVariant()
    directions: DirectionDistribution | None = None
    replications: int = 1
    seed: int = 0
    stride: int = 1
    clip_radius: float | None = None
    x0: np.ndarray | None = None
    M_G: float = DEFAULT_M_G
    check_feasibility: bool = True
    block: int = 512

    def __post_init__(self):
        for name in ("iterations", "replications", "stride", "block"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.stride > self.iterations:
            raise ValueError(f"stride {self.stride} exceeds the iteration budget {self.iterations}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.clip_radius is not None and not self.clip_radius > 0:
            raise ValueError(f"clip_radius must be positive, got {self.clip_radius!r}")
        if self.directions is not None and self.directions.dim != self.problem.dim:
            raise ValueError(
                f"direction dimension {self.directions.dim} does not match problem dimension {self.problem.dim}"
            )
        if self.variant.uses_objective and not callable(getattr(self.problem, "objective", None)):
            raise ValueError(f"{self.variant.kind} needs a problem exposing the full objective")
        if self.x0 is not None and np.shape(self.x0) != (self.problem.dim,):
            raise ValueError(f"x0 must have shape ({self.problem.dim},)")

    @property
    def dist(self) -> DirectionDistribution:
        return self.directions or DirectionDistribution(dim=self.problem.dim)

    @property
    def start(self) -> np.ndarray:
        return np.asarray(self.problem.x0 if self.x0 is None else self.x0, dtype=float)

    def recorded_k(self) -> np.ndarray:
        return np.arange(self.stride, self.iterations + 1, self.stride)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


@dataclass
class Trace:
    """Replication averages at the recorded iterations.

    Row ``i`` describes the iterate produced by iteration ``k[i]``, that is
    ``x_{k+1}``, together with the stepsize ``alpha_k`` that produced it.
    ``var_mk`` is ``None`` for runs without a momentum direction.
    """

    k: np.ndarray
    alpha: np.ndarray
    mean_gap: np.ndarray
    mean_grad_sq: np.ndarray
    replications: int
    var_mk: np.ndarray | None = None
    step_mean_sq: np.ndarray | None = None
    step_second_moment: np.ndarray | None = None
    initial_gap: float = float("nan")
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.k)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        if self.k.size and np.any(np.diff(self.k) <= 0):
            raise ValueError("trace iterations must be strictly increasing")

    def window(self, k_lo: float, k_hi: float) -> np.ndarray:
        return (self.k >= k_lo) & (self.k <= k_hi)


def _problem_meta(problem: StochasticProblem) -> dict:
    return problem.describe()


def _divergence_threshold(f1: np.ndarray) -> float:
    return DIVERGENCE_FACTOR * max(float(np.max(np.abs(f1))), np.finfo(float).tiny)


class _Recorder:
    def __init__(self, config: RunConfig, momentum: bool):
        self.config = config
        n = len(config.recorded_k())
        self.rows = 0
        self.alpha = np.empty(n)
        self.gap = np.empty(n)
        self.grad_sq = np.empty(n)
        self.step_mean_sq = np.empty(n)
        self.step_second = np.empty(n)
        self.var_mk = np.empty(n) if momentum else None

    def record(self, problem, X, alpha, s, m=None):
        i = self.rows
        self.alpha[i] = alpha
        self.gap[i] = float(np.mean(problem.gap(X)))
        g = problem.gradient(X)
        self.grad_sq[i] = float(np.mean(np.einsum("ri,ri->r", g, g)))
        mean_s = s.mean(axis=0)
        self.step_mean_sq[i] = float(mean_s @ mean_s)
        self.step_second[i] = float(np.mean(np.einsum("ri,ri->r", s, s)))
        if self.var_mk is not None:
            self.var_mk[i] = float(np.var(m, axis=0, ddof=1).sum()) if m.shape[0] > 1 else float("nan")
        self.rows += 1

    def trace(self, initial_gap, metadata) -> Trace:
        return Trace(
            k=self.config.recorded_k(), alpha=self.alpha, mean_gap=self.gap,
            mean_grad_sq=self.grad_sq, replications=self.config.replications,
            var_mk=self.var_mk, step_mean_sq=self.step_mean_sq,
            step_second_moment=self.step_second, initial_gap=initial_gap, metadata=metadata,
        )


def drive(config: RunConfig, make_update, method: str, n_uniforms: int | None = None,
          step_fn=None) -> Trace:
    """Shared iteration loop.

    ``make_update(R, d)`` returns ``update(k, alpha, s) -> (displacement, m)``
    where ``m`` is the search direction recorded for variance (or ``None``).
    ``step_fn(X, alpha, U)`` overrides the gradient-free step (used by SGD).
    """
    problem, dist = config.problem, config.dist
    R, d, K = config.replications, problem.dim, config.iterations
    notes = []
    if config.check_feasibility and method in ("sgfd", "momentum"):
        notes = check_schedule(config.schedule, problem.constants.l, problem.constants.L, config.M_G, method)
    elif method in ("sgfd", "momentum"):
        notes = ["feasibility checks disabled"]
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=3)
    if n_uniforms is None:
        n_uniforms = config.variant.n_uniforms(problem, dist)
    if step_fn is None:
        def step_fn(X, alpha, U):
            return compute_step(config.variant, problem, dist, X, alpha, U)

    rngs = [replication_rng(config.seed, r) for r in range(R)]
    x1 = config.start
    X = np.tile(x1, (R, 1))
    f1 = problem.objective(X)
    threshold = _divergence_threshold(f1)
    update = make_update(R, d)
    recorder = _Recorder(config, method == "momentum")
    started = time.perf_counter()
    stride = config.stride
    k = 0
    while k < K:
        block = min(config.block, K - k)
        U = draw_blocks(rngs, block, n_uniforms)
        for b in range(block):
            k += 1
            alpha = config.schedule.alpha(k)
            s = step_fn(X, alpha, U[b])
            disp, m = update(k, alpha, s)
            X = X + disp
            if config.clip_radius is not None:
                off = X - x1
                norm = np.sqrt(np.einsum("ri,ri->r", off, off))
                scale = np.minimum(1.0, config.clip_radius / np.maximum(norm, np.finfo(float).tiny))
                X = x1 + off * scale[:, None]
            fx = problem.objective(X)
            worst = float(np.max(fx)) if np.all(np.isfinite(fx)) else float("inf")
            if worst > threshold:
                raise DivergenceError(k, worst, threshold)
            if k % stride == 0:
                recorder.record(problem, X, alpha, s, m)
    metadata = {
        "method": method,
        "problem": _problem_meta(problem),
        "variant": {"kind": config.variant.kind, "n_k": config.variant.n_k, "m_k": config.variant.m_k},
        "directions": {"kind": dist.kind, "dim": dist.dim, "r_zeta": dist.r_zeta, "m4": dist.m4,
                       "d_zeta": dist.d_zeta},
        "schedule": config.schedule.as_dict(),
        "iterations": K,
        "replications": R,
        "seed": int(config.seed),
        "stride": stride,
        "M_G": config.M_G,
        "clip_radius": config.clip_radius,
        "feasibility_warnings": notes,
        "wall_clock_seconds": time.perf_counter() - started,
    }
    return recorder.trace(float(problem.gap(x1)), metadata)


def run_sgfd(config: RunConfig) -> Trace:
    """Plain SGFD: ``x_{k+1} = x_k + s_k`` for every replication."""

    def make_update(R, d):
        def update(k, alpha, s):
            return s, None
        return update

    return drive(config, make_update, "sgfd")


def run_reference_sgd(config: RunConfig) -> Trace:
    """Comparison baseline ``x_{k+1} = x_k - alpha_k * grad f(x_k, xi_k)``.

    Uses ``config.variant.n_k`` samples per step and the same trace format.
    """
    problem = config.problem
    n = config.variant.n_k
    width = n * problem.noise_width

    def step_fn(X, alpha, U):
        xi = problem.noise_from_uniform(U.reshape(U.shape[:-1] + (n, problem.noise_width)))
        g = problem.sample_gradient(X[..., None, :], xi).mean(axis=-2)
        return -alpha * g

    def make_update(R, d):
        return lambda k, alpha, s: (s, None)

    return drive(config, make_update, "reference-sgd", n_uniforms=width, step_fn=step_fn)

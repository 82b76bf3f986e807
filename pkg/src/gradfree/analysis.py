"""Bound calculators, rate fits and step-moment diagnostics.

Convergence envelope for a strongly convex objective with stepsizes
``alpha_k`` and contraction factor ``c_j = 1 - alpha_j * l / rate_divisor``::

    A_k = prod_{i<=k} c_i
    B_k = sum_{i<=k} alpha_i**2 prod_{i<j<=k} c_j
    E[F(x_{k+1})] - F* <= A_k (F(x_1) - F*) + (L * M_d / 2) * B_k

For ``alpha_k = beta / (k + sigma)`` the product is a ratio of gamma
functions, evaluated here through ``gammaln`` with explicit sign tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.special import gammaln, gammasgn

from .directions import DirectionDistribution
from .problems import StochasticProblem
from .sgfd import StepsizeSchedule, StepVariant, Trace, compute_step, ROBBINS_MONRO
from .streams import open_uniform

_POLE_TOL = 1e-12


# ---------------------------------------------------------------------------
# bound quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundParams:
    """Robbins-Monro parameters; ``rate_divisor`` is 1 (SGFD) or 2 (momentum)."""

    beta: float
    sigma: float
    l: float
    k: int = 1
    rate_divisor: int = 1

    def __post_init__(self):
        for name in ("beta", "sigma", "l"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if self.rate_divisor not in (1, 2):
            raise ValueError(f"rate_divisor must be 1 or 2, got {self.rate_divisor!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k!r}")
        z = 1.0 + self.sigma - self.a
        if z <= 0 and abs(z - round(z)) < _POLE_TOL:
            raise ValueError(
                f"1 + sigma - beta*l/{self.rate_divisor} = {z!r} is a pole of the gamma function"
            )

    @property
    def a(self) -> float:
        return self.beta * self.l / self.rate_divisor


# B_{2n} / (2n (2n - 1)), n = 1..7
_STIRLING = np.array([1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156])
_ASYMPTOTIC_FROM = 12.0


def _stirling_tail(x):
    inv2 = 1.0 / (x * x)
    acc = np.zeros_like(x)
    for c in _STIRLING[::-1]:
        acc = acc * inv2 + c
    return acc / x


def lgamma_diff(y, x):
    """``log|Gamma(y)| - log|Gamma(x)|`` without cancellation for large arguments.

    Subtracting two ``gammaln`` values near ``1e5`` loses about ten digits;
    above ``x, y >= 12`` the difference is formed from Stirling's series.
    """
    y, x = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(x, dtype=float))
    out = np.empty(y.shape)
    big = (x >= _ASYMPTOTIC_FROM) & (y >= _ASYMPTOTIC_FROM)
    out[~big] = gammaln(y[~big]) - gammaln(x[~big])
    xb, yb = x[big], y[big]
    h = yb - xb
    out[big] = (xb - 0.5) * np.log1p(h / xb) + h * np.log(yb) - h + _stirling_tail(yb) - _stirling_tail(xb)
    return out if out.ndim else float(out)


def _log_abs_A(p: BoundParams, k):
    """``(log|A_k|, sign A_k)`` for integer array ``k``."""
    k = np.asarray(k, dtype=float)
    s, a = p.sigma, p.a
    z = 1.0 + s - a
    log_abs = lgamma_diff(1.0 + s, z) + lgamma_diff(k + z, k + 1.0 + s)
    sign = gammasgn(z) * gammasgn(k + z)
    # an integer k + z <= 0 means one factor is exactly zero
    zero = (k + z <= 0) & (np.abs(k + z - np.round(k + z)) < _POLE_TOL)
    log_abs = np.where(zero, -np.inf, log_abs)
    sign = np.where(zero, 0.0, sign)
    return log_abs, sign


def bound_A(params: BoundParams) -> float:
    """``A_k = prod_{i=1..k} (1 - a/(i + sigma))`` with ``a = beta*l/rate_divisor``."""
    log_abs, sign = _log_abs_A(params, params.k)
    return float(sign * np.exp(log_abs))


def bound_A_sequence(params: BoundParams, k_max: int | None = None) -> np.ndarray:
    """``A_1..A_{k_max}`` (``k_max`` defaults to ``params.k``)."""
    k = np.arange(1, (k_max or params.k) + 1)
    log_abs, sign = _log_abs_A(params, k)
    return sign * np.exp(log_abs)


def _signed_logcumsum(log_abs, sign):
    """Running ``log`` of positive and negative partial sums."""
    pos = np.where(sign > 0, log_abs, -np.inf)
    neg = np.where(sign < 0, log_abs, -np.inf)
    return np.logaddexp.accumulate(pos), np.logaddexp.accumulate(neg)


def _B_from_logs(log_alpha2, log_abs_A, sign_A):
    """``B_k = A_k * sum_{i<=k} alpha_i**2 / A_i`` for every ``k``; needs ``A_i != 0``."""
    pos, neg = _signed_logcumsum(log_alpha2 - log_abs_A, sign_A)
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.exp(pos + log_abs_A) - np.exp(neg + log_abs_A)
    return sign_A * total


def bound_B_sequence(params: BoundParams, k_max: int | None = None) -> np.ndarray:
    """``B_1..B_{k_max}`` for the Robbins-Monro schedule."""
    k = np.arange(1, (k_max or params.k) + 1, dtype=float)
    alphas = params.beta / (k + params.sigma)
    log_abs, sign = _log_abs_A(params, k)
    if np.any(sign == 0):
        return schedule_bounds(alphas, params.l, params.rate_divisor)[1]
    return _B_from_logs(2.0 * np.log(alphas), log_abs, sign)


def bound_B(params: BoundParams) -> float:
    """``B_k = sum_i alpha_i**2 prod_{j>i} (1 - alpha_j*l/rate_divisor)``."""
    return float(bound_B_sequence(params)[-1])


def schedule_bounds(alphas, l: float, rate_divisor: int = 1):
    """``(A, B)`` sequences for an arbitrary stepsize sequence ``alphas``.

    Products are accumulated as sums of ``log|c_j|`` with separate signs; a
    factor that is exactly zero restarts the accumulation.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("alphas must be a non-empty vector")
    c = 1.0 - alphas * l / rate_divisor
    A = np.empty_like(alphas)
    B = np.empty_like(alphas)
    zeros = np.flatnonzero(c == 0.0)
    starts = [0] + [int(z) for z in zeros]
    ends = [int(z) for z in zeros] + [alphas.size]
    for start, end in zip(starts, ends):
        if start == end:
            continue
        seg = slice(start, end)
        cc = c[seg].copy()
        if start > 0:
            cc[0] = 1.0  # the zero factor kills every earlier contribution
        log_abs = np.cumsum(np.log(np.abs(cc)))
        sign = np.cumprod(np.sign(cc))
        if start == 0:
            A[seg] = sign * np.exp(log_abs)
        else:
            A[seg] = 0.0
        B[seg] = _B_from_logs(2.0 * np.log(alphas[seg]), log_abs, sign)
    return A, B


def A_asymptotic_constant(params: BoundParams) -> float:
    """``lim A_k * k**a = Gamma(1+sigma) / Gamma(1+sigma-a)``."""
    z = 1.0 + params.sigma - params.a
    return float(gammasgn(z) * np.exp(lgamma_diff(1.0 + params.sigma, z)))


def B_limit_constant(params: BoundParams) -> float:
    """``lim B_k * (k + 1 + sigma) = beta**2 / (a - 1)``, valid for ``a > 1``."""
    if not params.a > 1:
        raise ValueError(f"limit exists only for a = beta*l/rate_divisor > 1, got {params.a!r}")
    return params.beta**2 / (params.a - 1.0)


def fixed_step_B_limit(alpha_bar: float, l: float) -> float:
    return alpha_bar / l


def fixed_step_B(alpha_bar: float, l: float, k: int) -> float:
    """Closed form ``alpha_bar * (1 - (1 - alpha_bar*l)**k) / l``."""
    return alpha_bar * -math.expm1(k * math.log1p(-alpha_bar * l)) / l


def euler_sine_limit(beta_l: float) -> float:
    """``prod_{i>=1} (1 - beta_l / i**2) = sin(pi sqrt(beta_l)) / (pi sqrt(beta_l))``."""
    t = math.pi * math.sqrt(beta_l)
    return math.sin(t) / t


def bounds_for_schedule(schedule: StepsizeSchedule, l: float, k_max: int, rate_divisor: int = 1):
    """``(A, B)`` for ``k = 1..k_max``, through the gamma form when it applies."""
    if schedule.kind == ROBBINS_MONRO:
        p = BoundParams(schedule.beta, schedule.sigma, l, k_max, rate_divisor)
        return bound_A_sequence(p), bound_B_sequence(p)
    return schedule_bounds(schedule.alpha(np.arange(1, k_max + 1)), l, rate_divisor)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log k, log y)``; ``residual`` is the RMS in log space."""

    slope: float
    intercept: float
    k_lo: float
    k_hi: float
    residual: float
    n_points: int
    n_dropped: int = 0

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in ("slope", "intercept", "k_lo", "k_hi", "residual",
                                               "n_points", "n_dropped")}


MIN_FIT_POINTS = 10
MAX_DROP_FRACTION = 0.2


def fit_power_law(k, y, window=None) -> RateFit:
    """Fit ``y ~ C k**slope`` on ``window`` (default: last decade ``[k_max/10, k_max]``).

    Non-positive values are dropped; more than 20% dropped, or fewer than 10
    usable points, raises ``ValueError``.
    """
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    if k.shape != y.shape or k.ndim != 1:
        raise ValueError("k and y must be vectors of equal length")
    if k.size == 0:
        raise ValueError("no points to fit")
    if window is None:
        window = (k.max() / 10.0, k.max())
    lo, hi = map(float, window)
    if lo <= 0 or hi < lo:
        raise ValueError(f"invalid window [{lo}, {hi}]")
    inside = (k >= lo) & (k <= hi)
    n_in = int(inside.sum())
    if n_in < MIN_FIT_POINTS:
        raise ValueError(f"window [{lo:g}, {hi:g}] holds {n_in} points; need at least {MIN_FIT_POINTS}")
    good = inside & np.isfinite(y) & (y > 0)
    dropped = n_in - int(good.sum())
    if dropped > MAX_DROP_FRACTION * n_in:
        raise ValueError(f"{dropped} of {n_in} values in the window are non-positive or non-finite")
    if good.sum() < MIN_FIT_POINTS:
        raise ValueError(f"only {int(good.sum())} usable points in the window")
    lk, ly = np.log(k[good]), np.log(y[good])
    design = np.column_stack([lk, np.ones_like(lk)])
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ coef
    return RateFit(float(coef[0]), float(coef[1]), lo, hi, float(np.sqrt(np.mean(resid**2))),
                   int(good.sum()), dropped)


def fit_rate(trace: Trace, window=None, column: str = "mean_gap") -> RateFit:
    """Empirical exponent of ``trace.<column>`` against ``k``.

    For ``mean_gap`` the optimal value must be known; traces whose metadata
    records ``F_star = None`` are rejected.
    """
    if column == "mean_gap":
        constants = trace.metadata.get("problem", {}).get("constants", {})
        if "F_star" in constants and constants["F_star"] is None:
            raise ValueError("optimal value unknown; mean_gap holds F(x_k), not a gap")
    values = getattr(trace, column)
    if values is None:
        raise ValueError(f"trace has no {column} column")
    return fit_power_law(trace.k, values, window)


# ---------------------------------------------------------------------------
# step moments
# ---------------------------------------------------------------------------


@dataclass
class StepMomentReport:
    """Monte-Carlo moments of the step at one ``(x, alpha)``.

    ``variance`` is the plug-in (``1/n``) total variance, so
    ``second_moment == mean @ mean + variance`` up to roundoff.
    ``quadratic_form`` is ``grad F . E[s] + L/2 |E[s]|^2 + L/2 V[s]``, an
    upper bound on ``observed_change = E[F(x + s)] - F(x)``.
    """

    x: np.ndarray
    alpha: float
    mean: np.ndarray
    variance: float
    second_moment: float
    grad_sq: float
    quadratic_form: float | None
    observed_change: float
    n_samples: int

    @property
    def identity_residual(self) -> float:
        return float(self.second_moment - self.mean @ self.mean - self.variance)


def _chunk_sizes(n, chunk):
    while n > 0:
        m = min(chunk, n)
        yield m
        n -= m


def estimate_step_moments(problem: StochasticProblem, variant: StepVariant, x, alpha: float,
                          dist: DirectionDistribution, n_samples: int, rng: np.random.Generator,
                          chunk: int = 100_000, min_samples: int = 1000) -> StepMomentReport:
    """Mean, variance and one-step objective change of the step at ``x``."""
    if n_samples < min_samples:
        raise ValueError(f"n_samples must be at least {min_samples}, got {n_samples}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    x = np.asarray(x, dtype=float)
    width = variant.n_uniforms(problem, dist)
    d = problem.dim
    count = 0
    mean = np.zeros(d)
    m2 = 0.0
    sq_sum = 0.0
    change_sum = 0.0
    fx = float(problem.objective(x))
    for m in _chunk_sizes(n_samples, chunk):
        s = compute_step(variant, problem, dist, np.broadcast_to(x, (m, d)), alpha, open_uniform(rng, (m, width)))
        c_mean = s.mean(axis=0)
        c_m2 = float(np.sum((s - c_mean) ** 2))
        delta = c_mean - mean
        total = count + m
        mean = mean + delta * (m / total)
        m2 = m2 + c_m2 + float(delta @ delta) * count * m / total
        count = total
        sq_sum += float(np.einsum("ij,ij->", s, s))
        change_sum += float(np.sum(problem.objective(x + s) - fx))
    variance = m2 / count
    g = problem.gradient(x)
    L = problem.constants.L
    qf = None if L is None else float(g @ mean + 0.5 * L * (mean @ mean) + 0.5 * L * variance)
    return StepMomentReport(x, float(alpha), mean, variance, sq_sum / count, float(g @ g), qf,
                            change_sum / count, count)


@dataclass(frozen=True)
class VarianceModel:
    """``V[s] / alpha**2 ~ M + M_V * |grad F|**2`` fitted with nonnegative coefficients."""

    M: float
    M_V: float
    max_relative_residual: float

    def predict(self, alpha, grad_sq):
        return np.asarray(alpha) ** 2 * (self.M + self.M_V * np.asarray(grad_sq))

    def M_d(self, dist: DirectionDistribution) -> float:
        """``M + 5 d**3 D**2 / 4``."""
        return self.M + 1.25 * dist.dim**3 * dist.d_zeta**2

    def M_G(self) -> float:
        return self.M_V + 2.0


def fit_variance_model(reports) -> VarianceModel:
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two probe reports")
    grad_sq = np.array([r.grad_sq for r in reports])
    if np.ptp(grad_sq) <= 1e-12 * max(1.0, float(np.max(grad_sq))):
        raise ValueError("degenerate probe grid: every probe has the same gradient norm")
    y = np.array([r.variance / r.alpha**2 for r in reports])
    design = np.column_stack([np.ones_like(grad_sq), grad_sq])
    coef, _ = nnls(design, y)
    fitted = design @ coef
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(fitted > 0, np.abs(y - fitted) / fitted, np.inf)
    return VarianceModel(float(coef[0]), float(coef[1]), float(np.max(rel)))


# ---------------------------------------------------------------------------
# unbiasedness
# ---------------------------------------------------------------------------


class _Linearized(StochasticProblem):
    """First-order expansion of every sampled loss around ``x0``."""

    def __init__(self, base: StochasticProblem, x0):
        super().__init__(base.dim, base.constants, x0)
        self.base = base
        self.noise_width = base.noise_width
        self.finite_sum_size = base.finite_sum_size
        self._f0 = float(base.objective(self.x0))
        self._g0 = base.gradient(self.x0)

    def objective(self, y):
        return self._f0 + (np.asarray(y) - self.x0) @ self._g0

    def gradient(self, y):
        return np.broadcast_to(self._g0, np.shape(y))

    def sample_loss(self, y, xi):
        f = self.base.sample_loss(self.x0, xi)
        g = self.base.sample_gradient(self.x0, xi)
        return f + np.einsum("...i,...i->...", g, np.asarray(y) - self.x0)

    def noise_from_uniform(self, u):
        return self.base.noise_from_uniform(u)


@dataclass
class UnbiasednessProfile:
    """Deviation of ``mean(s/alpha)`` from ``-grad F`` along a stepsize ladder.

    ``deviation`` uses the linearized loss with the same draws as a control
    variate; ``naive_deviation`` is ``|mean(s/alpha) + grad F|`` without it.
    ``order`` is the fitted exponent of ``deviation`` in ``alpha``.
    """

    alphas: np.ndarray
    deviation: np.ndarray
    naive_deviation: np.ndarray
    bound: np.ndarray
    standard_error: np.ndarray
    order: float
    n_samples: int

    @property
    def monotone(self) -> bool:
        order = np.argsort(self.alphas)[::-1]
        return bool(np.all(np.diff(self.deviation[order]) < 0))


def unbiasedness_profile(problem: StochasticProblem, variant: StepVariant, x, alphas,
                         dist: DirectionDistribution, n_samples: int, rng: np.random.Generator,
                         chunk: int = 100_000) -> UnbiasednessProfile:
    """Estimate ``E[s/alpha] + grad F(x)`` for each ``alpha`` from shared draws.

    The linearized sampled loss has ``E[s_lin/alpha] = -grad F(x)`` exactly,
    so ``mean((s - s_lin)/alpha)`` estimates the same bias with the
    alpha-independent part of the Monte-Carlo error removed.
    """
    x = np.asarray(x, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas <= 0):
        raise ValueError("stepsizes must be positive")
    lin = _Linearized(problem, x)
    d = problem.dim
    width = variant.n_uniforms(problem, dist)
    g = problem.gradient(x)
    sums = np.zeros((alphas.size, d))
    sq = np.zeros(alphas.size)
    naive = np.zeros((alphas.size, d))
    count = 0
    for m in _chunk_sizes(n_samples, chunk):
        U = open_uniform(rng, (m, width))
        X = np.broadcast_to(x, (m, d))
        for i, a in enumerate(alphas):
            s = compute_step(variant, problem, dist, X, a, U) / a
            t = s - compute_step(variant, lin, dist, X, a, U) / a
            sums[i] += t.sum(axis=0)
            sq[i] += float(np.einsum("ij,ij->", t, t))
            naive[i] += s.sum(axis=0)
        count += m
    means = sums / count
    dev = np.linalg.norm(means, axis=1)
    se = np.sqrt(np.maximum(sq / count - np.einsum("ij,ij->i", means, means), 0.0) / count)
    naive_dev = np.linalg.norm(naive / count + g, axis=1)
    L = problem.constants.L
    bound = np.full(alphas.size, np.nan) if L is None else 0.5 * alphas * L * d**1.5 * dist.d_zeta
    order = float(np.polyfit(np.log(alphas), np.log(dev), 1)[0]) if alphas.size > 1 else float("nan")
    return UnbiasednessProfile(alphas, dev, naive_dev, bound, se, order, count)


# ---------------------------------------------------------------------------
# envelope
# ---------------------------------------------------------------------------


@dataclass
class EnvelopeCheck:
    k: np.ndarray
    observed: np.ndarray
    bound: np.ndarray
    M_d: float
    pass_fraction: float = field(init=False)

    def __post_init__(self):
        self.pass_fraction = float(np.mean(self.observed <= self.bound)) if self.k.size else 1.0


def envelope_check(trace: Trace, problem: StochasticProblem, schedule: StepsizeSchedule,
                   M_hat: float, dist: DirectionDistribution, rate_divisor: int = 1) -> EnvelopeCheck:
    """Compare recorded gaps with ``A_k gap_1 + (L M_d / 2) B_k``.

    Trace row ``k`` holds ``x_{k+1}``, which is what the envelope bounds.
    """
    c = problem.constants
    if c.l is None or c.L is None or c.F_star is None:
        raise ValueError("envelope needs l, L and F_star")
    if M_hat < 0:
        raise ValueError("M_hat must be nonnegative")
    A, B = bounds_for_schedule(schedule, c.l, int(trace.k[-1]), rate_divisor)
    idx = trace.k - 1
    M_d = M_hat + 1.25 * dist.dim**3 * dist.d_zeta**2
    bound = A[idx] * trace.initial_gap + 0.5 * c.L * M_d * B[idx]
    return EnvelopeCheck(trace.k.copy(), np.asarray(trace.mean_gap), bound, M_d)

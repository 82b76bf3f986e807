"""Momentum-accelerated gradient-free descent.

The search direction is a normalized weighted average of all past scaled
steps ``g_j = s_j / alpha_j``::

    v_k = gamma(k) * (v_{k-1} + g_k)
    W_k = gamma(k) * (W_{k-1} + 1)
    m_k = v_k / W_k
    x_{k+1} = x_k + alpha_k * m_k

With the changing decay ``gamma(k) = (k / (k + 1))**p`` the products
telescope, giving ``v_k = (k+1)**-p * sum_j j**p g_j`` and
``W_k = sum_j j**p / (k+1)**p``, so ``m_k`` puts weight proportional to
``j**p`` on step ``j``. A fixed ``gamma`` gives geometric weights instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .directions import DirectionDistribution
from .problems import StochasticProblem
from .sgfd import (
    RunConfig,
    StepsizeSchedule,
    StepVariant,
    Trace,
    compute_step,
    drive,
)
from .streams import draw_blocks, replication_rng

CHANGING = "changing"
FIXED_DECAY = "fixed"


def decay_factor(k: int, p: float) -> float:
    """``(k / (k + 1))**p``."""
    if not p > 0:
        raise ValueError(f"decay exponent p must be positive, got {p!r}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k!r}")
    return (k / (k + 1.0)) ** p


@dataclass(frozen=True)
class DecayMode:
    """``changing`` uses ``(k/(k+1))**p``; ``fixed`` uses a constant ``gamma``."""

    kind: str = CHANGING
    p: float = 2.0
    gamma: float | None = None

    def __post_init__(self):
        if self.kind == CHANGING:
            if not (self.p > 0 and math.isfinite(self.p)):
                raise ValueError(f"changing decay needs p > 0, got {self.p!r}")
        elif self.kind == FIXED_DECAY:
            if self.gamma is None or not 0.0 < self.gamma < 1.0:
                raise ValueError(f"fixed decay needs 0 < gamma < 1, got {self.gamma!r}")
        else:
            raise ValueError(f"unknown decay mode {self.kind!r}; expected 'changing' or 'fixed'")

    @classmethod
    def changing(cls, p: float = 2.0) -> "DecayMode":
        return cls(CHANGING, p=p)

    @classmethod
    def fixed(cls, gamma: float) -> "DecayMode":
        return cls(FIXED_DECAY, gamma=gamma)

    def factor(self, k: int) -> float:
        if self.kind == CHANGING:
            return decay_factor(k, self.p)
        return float(self.gamma)

    def weights(self, k: int) -> np.ndarray:
        """Unnormalized weights on ``g_1..g_k`` in ``v_k``."""
        j = np.arange(1, k + 1, dtype=float)
        if self.kind == CHANGING:
            return (j / (k + 1.0)) ** self.p
        return self.gamma ** (k - j + 1.0)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p if self.kind == CHANGING else None, "gamma": self.gamma}


@dataclass
class MomentumState:
    """Accumulator ``v``, normalizer ``W`` and iteration counter ``k``."""

    decay: DecayMode = field(default_factory=DecayMode)
    v: np.ndarray | None = None
    W: float = 0.0
    k: int = 0

    @property
    def direction(self) -> np.ndarray:
        if self.k == 0:
            raise ValueError("no step has been accumulated yet")
        return self.v / self.W


def update_direction(state: MomentumState, step, alpha: float) -> np.ndarray:
    """Fold ``step / alpha`` into ``state`` and return the new ``m_k``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")
    step = np.asarray(step, dtype=float)
    if not np.all(np.isfinite(step)):
        raise ValueError("step must be finite")
    k = state.k + 1
    gamma = state.decay.factor(k)
    g = step / alpha
    state.v = gamma * g if state.v is None else gamma * (state.v + g)
    state.W = gamma * (state.W + 1.0)
    state.k = k
    return state.v / state.W


def weight_ratio(k: int, decay: DecayMode) -> float:
    """``sum w_j**2 / (sum w_j)**2`` for the weights behind ``m_k``.

    Equals ``1/k`` for equal weights; tends to ``(1-gamma)/(1+gamma)`` for a
    fixed decay.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k!r}")
    w = decay.weights(k)
    return float(np.sum(w * w) / np.sum(w) ** 2)


def fixed_decay_ratio(gamma: float, k: int | None = None) -> float:
    """Closed form of :func:`weight_ratio` for a fixed decay (``k=None``: limit)."""
    base = (1.0 - gamma) / (1.0 + gamma)
    if k is None:
        return base
    return base * (1.0 + gamma**k) / (1.0 - gamma**k)


def run_accelerated(config: RunConfig, decay: DecayMode | None = None) -> Trace:
    """Momentum iteration for every replication.

    The first iteration applies ``s_1`` unchanged. Algebraically
    ``alpha_1 * m_1 = s_1``; skipping the round trip keeps ``x_2``
    bit-identical to plain SGFD under the same seed. The trace carries the
    across-replication variance of ``m_k`` (summed over coordinates).
    """
    decay = decay or DecayMode()

    def make_update(R, d):
        state = MomentumState(decay)

        def update(k, alpha, s):
            m = update_direction(state, s, alpha)
            return (s if k == 1 else alpha * m), m

        return update

    trace = drive(config, make_update, "momentum")
    trace.metadata["decay"] = decay.as_dict()
    return trace


@dataclass
class VarianceProfile:
    """Across-replication variances along a frozen trajectory.

    ``var_mk[i]`` is the variance of ``m_k`` at ``k[i]``; ``var_g`` is the
    variance of the single scaled step ``s_k / alpha_k`` averaged over all
    iterations, the level a fixed decay is compared against.
    """

    k: np.ndarray
    var_mk: np.ndarray
    var_g: float
    replications: int
    decay: DecayMode


def momentum_variance_profile(problem: StochasticProblem, schedule: StepsizeSchedule, decay: DecayMode,
                              iterations: int, replications: int, seed: int = 0,
                              variant: StepVariant | None = None,
                              directions: DirectionDistribution | None = None,
                              point=None, trajectory=None, record=None,
                              block: int = 256) -> VarianceProfile:
    """Replay fixed iterates, resampling only ``(xi, zeta)`` per replication.

    ``trajectory`` is an ``(iterations, d)`` array of iterates ``x_k``;
    otherwise every iteration uses ``point`` (default ``problem.x0``).
    ``record`` lists the iterations to report (default: all).
    """
    if replications < 2:
        raise ValueError("need at least 2 replications to estimate a variance")
    variant = variant or StepVariant()
    dist = directions or DirectionDistribution(dim=problem.dim)
    if trajectory is not None:
        path = np.asarray(trajectory, dtype=float)
        if path.shape != (iterations, problem.dim):
            raise ValueError(f"trajectory must have shape ({iterations}, {problem.dim})")
    else:
        x = np.asarray(problem.x0 if point is None else point, dtype=float)
        path = None
    ks = np.arange(1, iterations + 1) if record is None else np.asarray(sorted(set(record)), dtype=np.int64)
    if ks.size == 0 or ks[0] < 1 or ks[-1] > iterations:
        raise ValueError("record indices must lie in [1, iterations]")
    want = np.zeros(iterations + 1, dtype=bool)
    want[ks] = True

    rngs = [replication_rng(seed, r) for r in range(replications)]
    width = variant.n_uniforms(problem, dist)
    state = MomentumState(decay)
    out = []
    g_var_total = 0.0
    k = 0
    while k < iterations:
        n = min(block, iterations - k)
        U = draw_blocks(rngs, n, width)
        for b in range(n):
            k += 1
            alpha = schedule.alpha(k)
            xk = path[k - 1] if path is not None else x
            X = np.broadcast_to(xk, (replications, problem.dim))
            s = compute_step(variant, problem, dist, X, alpha, U[b])
            g_var_total += float(np.var(s / alpha, axis=0, ddof=1).sum())
            m = update_direction(state, s, alpha)
            if want[k]:
                out.append(float(np.var(m, axis=0, ddof=1).sum()))
    return VarianceProfile(ks, np.asarray(out), g_var_total / iterations, replications, decay)

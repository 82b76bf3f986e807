"""Random search directions with zero mean and identity covariance.

Two laws are supported: the uniform law on ``[-sqrt(3), sqrt(3)]^d`` (bounded
components, the default) and the standard normal law. Both are described by a
small immutable :class:`DirectionDistribution` that also carries the moment
constants used by the step bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .streams import open_uniform

UNIFORM = "uniform-symmetric"
NORMAL = "standard-normal"
KINDS = (UNIFORM, NORMAL)

_SQRT3 = math.sqrt(3.0)
_CHUNK = 200_000


@dataclass(frozen=True)
class DirectionDistribution:
    """Law of the random direction used by the gradient-free steps.

    Attributes:
        kind: ``"uniform-symmetric"`` or ``"standard-normal"``.
        dim: dimension of the direction vectors.
    """

    kind: str = UNIFORM
    dim: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown direction law {self.kind!r}; expected one of {KINDS}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dim!r}")

    @property
    def r_zeta(self) -> float | None:
        """Componentwise bound, ``None`` for unbounded laws."""
        return _SQRT3 if self.kind == UNIFORM else None

    @property
    def m4(self) -> float:
        """Componentwise fourth moment."""
        return 9.0 / 5.0 if self.kind == UNIFORM else 3.0

    @property
    def d_zeta(self) -> float:
        d = self.dim
        moment_term = math.sqrt(1.0 + self.m4 / d - 1.0 / d)
        r = self.r_zeta
        return moment_term if r is None else min(r, moment_term)

    @property
    def n_uniforms(self) -> int:
        return self.dim

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms on (0, 1) with trailing axis ``dim`` to directions."""
        u = np.asarray(u, dtype=float)
        if self.kind == UNIFORM:
            return _SQRT3 * (2.0 * u - 1.0)
        return ndtri(u)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        """Draw directions of shape ``size + (dim,)``."""
        shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
        return self.from_uniform(open_uniform(rng, shape + (self.dim,)))


def uniform_directions(dim: int) -> DirectionDistribution:
    return DirectionDistribution(UNIFORM, dim)


def normal_directions(dim: int) -> DirectionDistribution:
    return DirectionDistribution(NORMAL, dim)


def sample(dist: DirectionDistribution, rng: np.random.Generator) -> np.ndarray:
    """One direction vector."""
    return dist.sample(rng)


def moment_constants(dist: DirectionDistribution) -> tuple[float | None, float, float]:
    """Return ``(r_zeta, m4, d_zeta)``."""
    return dist.r_zeta, dist.m4, dist.d_zeta


def _chunks(n: int):
    done = 0
    while done < n:
        step = min(_CHUNK, n - done)
        yield step
        done += step


def empirical_moments(dist: DirectionDistribution, n_samples: int, rng: np.random.Generator):
    """Monte-Carlo componentwise mean and second-moment matrix of ``n_samples`` draws.

    Returns ``(mean, second_moment)`` where ``second_moment`` is the raw
    ``E[zeta zeta^T]`` estimate; for a unit-covariance law it should be close
    to the identity.
    """
    d = dist.dim
    total = np.zeros(d)
    outer = np.zeros((d, d))
    for m in _chunks(n_samples):
        z = dist.sample(rng, m)
        total += z.sum(axis=0)
        outer += z.T @ z
    return total / n_samples, outer / n_samples


def reconstruction_error(
    dist: DirectionDistribution,
    omega,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Norm of ``mean((omega . zeta) zeta) - omega`` over ``n_samples`` draws."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (dist.dim,):
        raise ValueError(f"omega has shape {omega.shape}, expected ({dist.dim},)")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    acc = np.zeros(dist.dim)
    for m in _chunks(n_samples):
        z = dist.sample(rng, m)
        acc += (z @ omega) @ z
    return float(np.linalg.norm(acc / n_samples - omega))


def third_moment_norm(dist: DirectionDistribution, n_samples: int, rng: np.random.Generator) -> float:
    """Norm of ``mean((zeta . zeta) zeta)`` over ``n_samples`` draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    acc = np.zeros(dist.dim)
    for m in _chunks(n_samples):
        z = dist.sample(rng, m)
        acc += np.einsum("i,ij->j", np.einsum("ij,ij->i", z, z), z)
    return float(np.linalg.norm(acc / n_samples))


def third_moment_bound(dist: DirectionDistribution) -> float:
    """Upper bound ``d^(3/2) * d_zeta`` on the exact third-moment norm."""
    return dist.dim**1.5 * dist.d_zeta

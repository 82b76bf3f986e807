"""Stochastic test objectives ``F(x) = E[f(x, xi)]`` with known constants.

Every problem evaluates on arrays with arbitrary leading axes: ``x`` has a
trailing axis of length ``dim`` and a noise sample ``xi`` has a trailing axis
of length ``noise_width``. Noise is produced from open uniforms through
:meth:`StochasticProblem.noise_from_uniform` so that samplers share the
package-wide random streams.

Gradients are exposed for diagnostics and for the reference SGD baseline; the
gradient-free optimizers never call them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, ndtri

from .streams import open_uniform


@dataclass(frozen=True)
class ProblemConstants:
    """Known analytic constants; ``None`` where a constant does not exist.

    Attributes:
        l: strong-convexity modulus.
        L: Lipschitz constant of the gradient (on ``box`` when one is set).
        L_G: Lipschitz constant of the gradient of ``||grad F||^2``.
        F_star: minimum value.
        x_star: minimizer.
        F_inf: lower bound on ``F``.
    """

    l: float | None = None
    L: float | None = None
    L_G: float | None = None
    F_star: float | None = None
    x_star: np.ndarray | None = None
    F_inf: float | None = None

    def as_dict(self) -> dict:
        out = {}
        for name in ("l", "L", "L_G", "F_star", "F_inf"):
            value = getattr(self, name)
            out[name] = None if value is None else float(value)
        out["x_star"] = None if self.x_star is None else [float(v) for v in self.x_star]
        return out


class StochasticProblem:
    """Base class for ``F(x) = E_xi[f(x, xi)]``."""

    name = "problem"
    noise_width = 1
    finite_sum_size: int | None = None

    def __init__(self, dim: int, constants: ProblemConstants, x0: np.ndarray):
        self.dim = int(dim)
        self.constants = constants
        self.x0 = np.asarray(x0, dtype=float)
        self.box: tuple[float, float] | None = None

    # objective and samples -------------------------------------------------
    def objective(self, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def sample_loss(self, x, xi) -> np.ndarray:
        raise NotImplementedError

    def sample_gradient(self, x, xi) -> np.ndarray:
        raise NotImplementedError

    def noise_from_uniform(self, u) -> np.ndarray:
        raise NotImplementedError

    def draw_noise(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
        return self.noise_from_uniform(open_uniform(rng, shape + (self.noise_width,)))

    # conveniences -----------------------------------------------------------
    def gap(self, x) -> np.ndarray:
        """``F(x) - F_star``, or ``F(x)`` when the minimum is unknown."""
        value = self.objective(x)
        if self.constants.F_star is None:
            return value
        return value - self.constants.F_star

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "constants": self.constants.as_dict()}

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


def _as_points(x):
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------------------
# quadratic
# ---------------------------------------------------------------------------


class QuadraticProblem(StochasticProblem):
    """``F(x) = 0.5 (x - x*)^T diag(lam) (x - x*)`` with linear-in-x noise.

    A sample is ``f(x, xi) = F(x) + noise_sd * (xi_0 + xi_rest . (x - x*))``
    with ``xi`` standard normal of width ``dim + 1``. The constant term
    cancels in any finite difference taken with a shared ``xi``; the linear
    term does not, and gives the step variance its stepsize-squared floor.
    """

    name = "quadratic"

    def __init__(self, eigenvalues, x_star, noise_sd: float = 0.0, x0=None):
        lam = np.asarray(eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a non-empty vector")
        if not np.all(lam > 0) or not np.all(np.isfinite(lam)):
            raise ValueError(f"eigenvalues must be positive and finite, got {lam}")
        if noise_sd < 0 or not math.isfinite(noise_sd):
            raise ValueError(f"noise_sd must be finite and >= 0, got {noise_sd}")
        x_star = np.asarray(x_star, dtype=float)
        if x_star.shape != lam.shape:
            raise ValueError("x_star and eigenvalues must have the same length")
        constants = ProblemConstants(
            l=float(lam.min()), L=float(lam.max()), L_G=2.0 * float(lam.max()) ** 2,
            F_star=0.0, x_star=x_star, F_inf=0.0,
        )
        super().__init__(lam.size, constants, x_star + 1.0 if x0 is None else x0)
        self.eigenvalues = lam
        self.x_star = x_star
        self.noise_sd = float(noise_sd)
        self.noise_width = lam.size + 1

    def objective(self, x):
        e = _as_points(x) - self.x_star
        return 0.5 * np.einsum("...i,i,...i->...", e, self.eigenvalues, e)

    def gradient(self, x):
        return self.eigenvalues * (_as_points(x) - self.x_star)

    def sample_loss(self, x, xi):
        x = _as_points(x)
        xi = np.asarray(xi, dtype=float)
        e = x - self.x_star
        value = 0.5 * np.einsum("...i,i,...i->...", e, self.eigenvalues, e)
        if self.noise_sd == 0.0:
            return value + 0.0 * xi[..., 0]
        return value + self.noise_sd * (xi[..., 0] + np.einsum("...i,...i->...", xi[..., 1:], e))

    def sample_gradient(self, x, xi):
        xi = np.asarray(xi, dtype=float)
        return self.gradient(x) + self.noise_sd * xi[..., 1:]

    def noise_from_uniform(self, u):
        return ndtri(np.asarray(u, dtype=float))


def quadratic(d: int, eigenvalues=None, noise_sd: float = 0.0, rng=None, x_star=None) -> QuadraticProblem:
    """Diagonal quadratic with a random minimizer drawn from ``rng``.

    ``eigenvalues`` defaults to all ones; the start point is ``x* + 1``.
    """
    lam = np.ones(d) if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    if lam.shape != (d,):
        raise ValueError(f"expected {d} eigenvalues, got shape {lam.shape}")
    if x_star is None:
        rng = np.random.default_rng(0) if rng is None else rng
        x_star = rng.standard_normal(d)
    return QuadraticProblem(lam, x_star, noise_sd)


def conditioned_quadratic(d: int, condition: float, noise_sd: float = 0.0, seed: int = 0) -> QuadraticProblem:
    """Quadratic with eigenvalues evenly spaced on ``[1, condition]``."""
    if condition < 1:
        raise ValueError(f"condition number must be >= 1, got {condition}")
    lam = np.linspace(1.0, condition, d) if d > 1 else np.ones(1)
    return quadratic(d, lam, noise_sd, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


class LogisticProblem(StochasticProblem):
    """L2-regularized logistic loss averaged over a finite dataset."""

    name = "logistic"
    noise_width = 1

    def __init__(self, features, labels, l2: float):
        a = np.asarray(features, dtype=float)
        y = np.asarray(labels, dtype=float)
        if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
            raise ValueError("features must be a non-empty n x d matrix")
        if y.shape != (a.shape[0],):
            raise ValueError(f"expected {a.shape[0]} labels, got shape {y.shape}")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isfinite(a)):
            raise ValueError("features must be finite")
        if not (l2 > 0 and math.isfinite(l2)):
            raise ValueError(f"l2 must be positive, got {l2}")
        self.features = a
        self.labels = y
        self.l2 = float(l2)
        self.finite_sum_size = a.shape[0]
        n, d = a.shape
        x_star = self._reference_minimizer(d)
        f_star = float(self.objective(x_star))
        constants = ProblemConstants(
            l=self.l2,
            L=self.l2 + float(np.max(np.einsum("ij,ij->i", a, a))) / 4.0,
            F_star=f_star, x_star=x_star, F_inf=f_star,
        )
        super().__init__(d, constants, np.zeros(d))

    def _reference_minimizer(self, d):
        res = optimize.minimize(
            self.objective, np.zeros(d), jac=self.gradient, hess=self.hessian,
            method="trust-exact", options={"gtol": 1e-10, "maxiter": 500},
        )
        x = res.x
        # trust-exact can stop just short of the tolerance; the objective is
        # strongly convex, so plain Newton steps finish quadratically.
        for _ in range(5):
            g = self.gradient(x)
            if np.linalg.norm(g) <= 1e-12:
                break
            x = x - np.linalg.solve(self.hessian(x), g)
        if np.linalg.norm(self.gradient(x)) > 1e-10:
            raise RuntimeError("reference minimization did not converge")
        return x

    def objective(self, x):
        x = _as_points(x)
        z = np.einsum("...j,nj->...n", x, self.features) * self.labels
        return np.logaddexp(0.0, -z).mean(axis=-1) + 0.5 * self.l2 * np.einsum("...j,...j->...", x, x)

    def gradient(self, x):
        x = _as_points(x)
        z = np.einsum("...j,nj->...n", x, self.features) * self.labels
        w = -expit(-z) * self.labels
        return np.einsum("...n,nj->...j", w, self.features) / self.finite_sum_size + self.l2 * x

    def hessian(self, x):
        z = (self.features @ x) * self.labels
        p = expit(z)
        w = p * (1.0 - p)
        a = self.features
        return (a.T * w) @ a / self.finite_sum_size + self.l2 * np.eye(a.shape[1])

    def _rows(self, xi):
        idx = np.asarray(xi)[..., 0].astype(np.intp)
        return self.features[idx], self.labels[idx]

    def sample_loss(self, x, xi):
        x = _as_points(x)
        a, y = self._rows(xi)
        z = np.einsum("...j,...j->...", x, a) * y
        return np.logaddexp(0.0, -z) + 0.5 * self.l2 * np.einsum("...j,...j->...", x, x)

    def sample_gradient(self, x, xi):
        x = _as_points(x)
        a, y = self._rows(xi)
        z = np.einsum("...j,...j->...", x, a) * y
        return (-expit(-z) * y)[..., None] * a + self.l2 * x

    def noise_from_uniform(self, u):
        n = self.finite_sum_size
        return np.minimum(np.floor(np.asarray(u) * n), n - 1)

    def all_noise(self) -> np.ndarray:
        """Every index of the finite sum, shape ``(n, 1)``."""
        return np.arange(self.finite_sum_size, dtype=float)[:, None]


def logistic_regression(features, labels, l2: float) -> LogisticProblem:
    return LogisticProblem(features, labels, l2)


def synthetic_classification(n: int, d: int, seed: int = 0, margin: float = 1.0):
    """Linearly separable-ish data: Gaussian features, labels from a noisy plane."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    score = margin * (a @ w) / math.sqrt(d) + rng.standard_normal(n)
    y = np.where(score >= 0, 1.0, -1.0)
    return a, y


def load_dataset(path, delimiter=None):
    """Read ``label, feature_1, ..., feature_d`` rows from delimited text.

    ``delimiter=None`` splits on whitespace; pass ``","`` for CSV.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty file; reported below
            data = np.loadtxt(path, delimiter=delimiter, ndmin=2, dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: cannot parse dataset ({exc})") from exc
    if data.shape[0] == 0:
        raise ValueError(f"{path}: dataset is empty")
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need a label column and at least one feature column")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: dataset contains non-finite values")
    labels = data[:, 0]
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError(f"{path}: labels in the first column must be -1 or +1")
    return data[:, 1:], labels


# ---------------------------------------------------------------------------
# Rosenbrock
# ---------------------------------------------------------------------------


def _rosen_pair_hessian_norm(a, b):
    h11 = 1200.0 * a * a - 400.0 * b + 2.0
    h12 = -400.0 * a
    h22 = 200.0
    half = 0.5 * (h11 - h22)
    return np.abs(0.5 * (h11 + h22)) + np.sqrt(half * half + h12 * h12)


def _rosen_pair_lg(a, b):
    # Jacobian of grad ||grad F||^2 = 2 H g for one pair is 2 (H H + T(g)).
    d = b - a * a
    ga = -400.0 * a * d - 2.0 * (1.0 - a)
    gb = 200.0 * d
    h11 = 1200.0 * a * a - 400.0 * b + 2.0
    h12 = -400.0 * a
    h22 = np.full_like(a, 200.0)
    t11 = 2400.0 * a * ga - 400.0 * gb
    t12 = -400.0 * ga
    j11 = 2.0 * (h11 * h11 + h12 * h12 + t11)
    j12 = 2.0 * (h11 * h12 + h12 * h22 + t12)
    j22 = 2.0 * (h12 * h12 + h22 * h22)
    half = 0.5 * (j11 - j22)
    return np.abs(0.5 * (j11 + j22)) + np.sqrt(half * half + j12 * j12)


class RosenbrockProblem(StochasticProblem):
    """Sum of ``d/2`` decoupled Rosenbrock pairs with bounded linear noise.

    ``f(x, xi) = F(x) + noise_sd * (xi_0 + xi_rest . (x - 1))`` with ``xi``
    uniform on ``[-1, 1]^(d+1)``. ``L`` and ``L_G`` hold on ``box`` only and
    are computed on a dense grid of one pair (pairs are decoupled).
    """

    name = "rosenbrock"

    def __init__(self, d: int, noise_sd: float = 0.0, box=(-1.5, 1.5), x0=None, grid: int = 1201):
        if int(d) != d or d < 2 or d % 2:
            raise ValueError(f"dimension must be an even integer >= 2, got {d}")
        if noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
        lo, hi = map(float, box)
        t = np.linspace(lo, hi, grid)
        a, b = np.meshgrid(t, t)
        lipschitz = float(_rosen_pair_hessian_norm(a, b).max())
        lipschitz_g = float(_rosen_pair_lg(a, b).max())
        constants = ProblemConstants(
            L=lipschitz, L_G=lipschitz_g, F_star=0.0, x_star=np.ones(d), F_inf=0.0,
        )
        super().__init__(d, constants, np.zeros(d) if x0 is None else x0)
        self.box = (lo, hi)
        self.noise_sd = float(noise_sd)
        self.noise_width = d + 1

    def objective(self, x):
        x = _as_points(x)
        a, b = x[..., 0::2], x[..., 1::2]
        return (100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2).sum(axis=-1)

    def gradient(self, x):
        x = _as_points(x)
        a, b = x[..., 0::2], x[..., 1::2]
        g = np.empty(np.broadcast_shapes(x.shape))
        g[..., 0::2] = -400.0 * a * (b - a * a) - 2.0 * (1.0 - a)
        g[..., 1::2] = 200.0 * (b - a * a)
        return g

    def sample_loss(self, x, xi):
        x = _as_points(x)
        xi = np.asarray(xi, dtype=float)
        value = self.objective(x)
        if self.noise_sd == 0.0:
            return value + 0.0 * xi[..., 0]
        return value + self.noise_sd * (xi[..., 0] + np.einsum("...i,...i->...", xi[..., 1:], x - 1.0))

    def sample_gradient(self, x, xi):
        xi = np.asarray(xi, dtype=float)
        return self.gradient(x) + self.noise_sd * xi[..., 1:]

    def noise_from_uniform(self, u):
        return 2.0 * np.asarray(u, dtype=float) - 1.0


def rosenbrock_like(d: int, noise_sd: float = 0.0, box=(-1.5, 1.5)) -> RosenbrockProblem:
    return RosenbrockProblem(d, noise_sd, box)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    """Named problem recipe, e.g. ``CatalogEntry("quadratic", {"dimension": 10})``."""

    name: str
    params: dict = field(default_factory=dict)

    def build(self) -> StochasticProblem:
        return build_problem(self.name, **self.params)


def build_problem(name: str, **params) -> StochasticProblem:
    """Construct a catalog problem.

    ``quadratic``: dimension, condition (1), noise_sd (0), seed (0).
    ``logistic``: dataset (path) or n/dimension/seed for synthetic data;
    l2 (0.01), delimiter.
    ``rosenbrock``: dimension (2), noise_sd (0), box_low/box_high (-1.5/1.5).
    """
    params = dict(params)
    if name == "quadratic":
        if "dimension" not in params:
            raise ValueError("quadratic needs a 'dimension' parameter")
        d = int(params.pop("dimension"))
        prob = conditioned_quadratic(
            d, float(params.pop("condition", 1.0)),
            float(params.pop("noise_sd", 0.0)), int(params.pop("seed", 0)),
        )
    elif name == "logistic":
        l2 = float(params.pop("l2", 0.01))
        path = params.pop("dataset", None)
        delimiter = params.pop("delimiter", None)
        if path is not None:
            a, y = load_dataset(path, delimiter)
        else:
            a, y = synthetic_classification(
                int(params.pop("n", 200)), int(params.pop("dimension", 5)), int(params.pop("seed", 0)),
            )
        prob = logistic_regression(a, y, l2)
    elif name == "rosenbrock":
        prob = rosenbrock_like(
            int(params.pop("dimension", 2)), float(params.pop("noise_sd", 0.0)),
            (float(params.pop("box_low", -1.5)), float(params.pop("box_high", 1.5))),
        )
    else:
        raise ValueError(f"unknown problem {name!r}; expected quadratic, logistic or rosenbrock")
    if params:
        raise ValueError(f"unknown parameters for {name}: {sorted(params)}")
    return prob

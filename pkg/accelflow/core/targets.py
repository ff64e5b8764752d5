"""
Target distributions rho_inf = exp(-f) and initial distributions rho_0.

Every density method accepts either a single point of shape (d,) or a batch of
particles of shape (N, d) and answers with the matching shape.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp
from scipy.stats import norm

from accelflow.core.errors import CapabilityError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]


class Observable(Enum):
    """Test functions psi whose expectation under rho_inf is estimated."""
    HALF_RECTIFIED_IDENTITY = "half_rectified_identity"
    MEAN = "mean"
    SECOND_MOMENT = "second_moment"

    def evaluate(self, positions: np.ndarray) -> np.ndarray:
        """
        Apply psi to the first coordinate of every particle.

        Args:
            positions: Particle positions, shape (N, d).

        Returns:
            np.ndarray: psi(X^i), shape (N,).
        """
        x = np.atleast_2d(np.asarray(positions, dtype=float))[:, 0]
        if self is Observable.HALF_RECTIFIED_IDENTITY:
            return np.where(x >= 0, x, 0.0)
        if self is Observable.MEAN:
            return x
        return x * x


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """
    Build the counter-based generator used everywhere a draw is needed.

    Args:
        seed: Run seed (non-negative).
        stream: Independent stream index within the run (initial sample,
            Langevin noise, ...).

    Returns:
        np.random.Generator: Philox-backed generator.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def derive_seeds(master_seed: int, runs: int) -> List[int]:
    """Derive `runs` reproducible seeds from a master seed by (master, index) mixing."""
    if runs < 1:
        raise UsageError(f"number of runs must be >= 1, got {runs}")
    return [
        int(np.random.SeedSequence([int(master_seed), index]).generate_state(1, dtype=np.uint32)[0])
        for index in range(runs)
    ]


def _as_matrix(value: ArrayLike, dim: int, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(value, dtype=float))
    if matrix.shape != (dim, dim):
        raise UsageError(f"{name} must have shape ({dim}, {dim}), got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise UsageError(f"{name} has non-finite entries")
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
        raise UsageError(f"{name} is not symmetric")
    return matrix


def _cholesky(matrix: np.ndarray, name: str) -> Tuple[np.ndarray, bool]:
    try:
        return cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError as e:
        smallest = float(np.linalg.eigvalsh(matrix).min())
        raise UsageError(f"{name} is not positive definite (smallest eigenvalue {smallest:.3e})") from e


class Target:
    """Base class for targets rho_inf with potential f = -log rho_inf."""

    dim: int

    def _rows(self, x: ArrayLike) -> Tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim <= 1
        rows = arr.reshape(1, -1) if single else arr
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise UsageError(f"expected points of dimension {self.dim}, got shape {arr.shape}")
        return rows, single

    def log_density(self, x: ArrayLike):
        raise NotImplementedError

    def grad_potential(self, x: ArrayLike):
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def exact_expectation(self, observable: Observable) -> float:
        raise NotImplementedError

    def potential(self, x: ArrayLike):
        """Return f(x) = -log rho_inf(x) (normalized)."""
        return -self.log_density(x)


class GaussianTarget(Target):
    """
    Gaussian target N(mean, covariance), f(x) = 1/2 (x - mean)^T Q^-1 (x - mean) + const.

    Args:
        mean: Mean vector x_bar, length d (a scalar means d = 1).
        covariance: Symmetric positive-definite Q, shape (d, d).
    """

    def __init__(self, mean: ArrayLike, covariance: ArrayLike):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        self.dim = self.mean.shape[0]
        self.covariance = _as_matrix(covariance, self.dim, "covariance")
        self._chol = _cholesky(self.covariance, "covariance")
        self._lower = np.tril(self._chol[0])
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(self._lower))))
        self.mean.flags.writeable = False
        self.covariance.flags.writeable = False

    def __repr__(self) -> str:
        return f"GaussianTarget(mean={self.mean.tolist()}, covariance={self.covariance.tolist()})"

    @property
    def precision(self) -> np.ndarray:
        return cho_solve(self._chol, np.eye(self.dim))

    def grad_potential(self, x: ArrayLike) -> np.ndarray:
        """
        Gradient of the potential, Q^-1 (x - mean).

        Args:
            x: Point (d,) or particles (N, d).

        Returns:
            np.ndarray: Same shape as `x`.
        """
        rows, single = self._rows(x)
        grad = cho_solve(self._chol, (rows - self.mean).T).T
        return grad[0] if single else grad

    def log_density(self, x: ArrayLike):
        """Normalized log-density log N(x; mean, Q); scalar for one point, (N,) for particles."""
        rows, single = self._rows(x)
        z = solve_triangular(self._lower, (rows - self.mean).T, lower=True)
        quad = np.sum(z * z, axis=0)
        values = -0.5 * quad - 0.5 * self.dim * math.log(2.0 * math.pi) - 0.5 * self._log_det
        return float(values[0]) if single else values

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise UsageError(f"sample size must be >= 1, got {n}")
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._lower.T

    def exact_expectation(self, observable: Observable) -> float:
        """
        Closed-form E[psi(X)] under the target (d = 1 only).

        Raises:
            CapabilityError: For d > 1.
        """
        if self.dim != 1:
            raise CapabilityError(f"closed-form expectation of {observable.value} requires d=1, got d={self.dim}")
        mu = float(self.mean[0])
        sigma = math.sqrt(float(self.covariance[0, 0]))
        if observable is Observable.HALF_RECTIFIED_IDENTITY:
            return mu * norm.cdf(mu / sigma) + sigma * norm.pdf(mu / sigma)
        if observable is Observable.MEAN:
            return mu
        if observable is Observable.SECOND_MOMENT:
            return sigma ** 2 + mu ** 2
        raise CapabilityError(f"unsupported observable {observable}")


class GaussianMixtureTarget(Target):
    """
    Finite Gaussian mixture sum_k w_k N(mean_k, cov_k).

    The potential gradient is evaluated in responsibility form
    sum_k r_k(x) Q_k^-1 (x - mean_k) with log-sum-exp responsibilities, which
    stays finite far in the tails.
    """

    def __init__(self, weights: Sequence[float], means: Sequence[ArrayLike], covariances: Sequence[ArrayLike]):
        self.weights = np.asarray(weights, dtype=float).copy()
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise UsageError("mixture weights must be a non-empty vector")
        if np.any(self.weights <= 0):
            raise UsageError(f"mixture weights must be > 0, got {self.weights.tolist()}")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise UsageError(f"mixture weights must sum to 1, got {self.weights.sum()!r}")
        if not len(means) == len(covariances) == self.weights.size:
            raise UsageError("mixture weights, means and covariances differ in length")
        self.components = [GaussianTarget(m, c) for m, c in zip(means, covariances)]
        dims = {component.dim for component in self.components}
        if len(dims) != 1:
            raise UsageError(f"mixture components have different dimensions {sorted(dims)}")
        self.dim = dims.pop()
        self._log_weights = np.log(self.weights)
        self.weights.flags.writeable = False

    @classmethod
    def symmetric(cls, m: float, sigma2: float) -> "GaussianMixtureTarget":
        """The scalar mixture 1/2 N(-m, sigma2) + 1/2 N(m, sigma2)."""
        return cls([0.5, 0.5], [[-m], [m]], [[[sigma2]], [[sigma2]]])

    def __repr__(self) -> str:
        return f"GaussianMixtureTarget(weights={self.weights.tolist()}, components={self.components})"

    def _component_log_terms(self, rows: np.ndarray) -> np.ndarray:
        return np.column_stack([
            log_w + component.log_density(rows)
            for log_w, component in zip(self._log_weights, self.components)
        ])

    def log_density(self, x: ArrayLike):
        rows, single = self._rows(x)
        values = logsumexp(self._component_log_terms(rows), axis=1)
        return float(values[0]) if single else values

    def responsibilities(self, x: ArrayLike) -> np.ndarray:
        """Posterior component probabilities r_k(x), shape (N, K)."""
        rows, _ = self._rows(x)
        terms = self._component_log_terms(rows)
        return np.exp(terms - logsumexp(terms, axis=1, keepdims=True))

    def grad_potential(self, x: ArrayLike) -> np.ndarray:
        rows, single = self._rows(x)
        resp = self.responsibilities(rows)
        grad = np.zeros_like(rows)
        for k, component in enumerate(self.components):
            grad += resp[:, k:k + 1] * component.grad_potential(rows)
        return grad[0] if single else grad

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise UsageError(f"sample size must be >= 1, got {n}")
        labels = rng.choice(self.weights.size, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k, component in enumerate(self.components):
            mask = labels == k
            if mask.any():
                out[mask] = component.sample(int(mask.sum()), rng)
        return out

    def exact_expectation(self, observable: Observable) -> float:
        return float(sum(w * c.exact_expectation(observable) for w, c in zip(self.weights, self.components)))


def quadrature_expectation(target: Target, observable: Observable, tol: float = 1e-10) -> float:
    """
    E[psi(X)] by adaptive quadrature of psi * rho_inf over the real line (d = 1).

    Args:
        target: One-dimensional target.
        observable: Test function psi.
        tol: Absolute tolerance passed to the integrator.

    Returns:
        float: The integral.
    """
    if target.dim != 1:
        raise CapabilityError("quadrature expectation is available for d=1 only")

    def integrand(x: float) -> float:
        return float(observable.evaluate(np.array([[x]]))[0]) * math.exp(target.log_density(np.array([x])))

    # split at 0, where the half-rectified identity has its kink
    lower, _ = integrate.quad(integrand, -np.inf, 0.0, epsabs=tol, epsrel=tol, limit=200)
    upper, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=tol, epsrel=tol, limit=200)
    return lower + upper


def monte_carlo_expectation(target: Target, observable: Observable, n: int,
                            rng: np.random.Generator) -> Tuple[float, float]:
    """
    Monte Carlo estimate of E[psi(X)] with its standard error.

    Returns:
        Tuple[float, float]: (estimate, standard error)
    """
    values = observable.evaluate(target.sample(n, rng))
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    logger.debug(f"Monte Carlo expectation of {observable.value}: {values.mean():.6g} +/- {stderr:.2g}")
    return float(values.mean()), stderr


def expectation_truth(target: Target, observable: Observable,
                      rng: Optional[np.random.Generator] = None, n: int = 1_000_000) -> float:
    """Exact expectation when a closed form exists, Monte Carlo otherwise."""
    try:
        return target.exact_expectation(observable)
    except CapabilityError:
        estimate, stderr = monte_carlo_expectation(target, observable, n, rng or make_rng(0))
        logger.info(f"Using Monte Carlo truth for {observable.value}: {estimate:.6g} (stderr {stderr:.2g})")
        return estimate


class Phi0Kind(Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"


@dataclass
class Phi0:
    """
    Convex potential phi_0 whose gradient sets the initial momenta.

    Linear: phi_0(x) = slope . x + offset. Quadratic: phi_0(x) = 1/2 x^T A x with A PSD.
    """
    kind: Phi0Kind
    slope: Optional[np.ndarray] = None
    offset: float = 0.0
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is Phi0Kind.LINEAR:
            if self.slope is None:
                raise UsageError("linear phi0 needs a slope")
            self.slope = np.atleast_1d(np.asarray(self.slope, dtype=float))
        else:
            if self.matrix is None:
                raise UsageError("quadratic phi0 needs a matrix")
            self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if not np.allclose(self.matrix, self.matrix.T):
                raise UsageError("quadratic phi0 matrix must be symmetric")
            smallest = float(np.linalg.eigvalsh(self.matrix).min())
            if smallest < -1e-12 * max(1.0, float(np.abs(self.matrix).max())):
                raise UsageError(f"quadratic phi0 must be convex (smallest eigenvalue {smallest:.3e})")

    @classmethod
    def linear(cls, slope: ArrayLike, offset: float = 0.0) -> "Phi0":
        return cls(Phi0Kind.LINEAR, slope=np.asarray(slope, dtype=float), offset=float(offset))

    @classmethod
    def quadratic(cls, matrix: ArrayLike) -> "Phi0":
        return cls(Phi0Kind.QUADRATIC, matrix=np.asarray(matrix, dtype=float))

    @property
    def dim(self) -> int:
        return self.slope.shape[0] if self.kind is Phi0Kind.LINEAR else self.matrix.shape[0]

    def value(self, x: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(x)
        if self.kind is Phi0Kind.LINEAR:
            return rows @ self.slope + self.offset
        return 0.5 * np.einsum("ij,jk,ik->i", rows, self.matrix, rows)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind is Phi0Kind.LINEAR:
            return np.broadcast_to(self.slope, x.shape).copy()
        return x @ self.matrix.T


@dataclass
class GaussianInitial:
    """Initial law rho_0 = N(mean, covariance) with momenta Y_0 = grad phi_0(X_0)."""
    mean: np.ndarray
    covariance: np.ndarray
    phi0: Phi0 = field(default_factory=lambda: Phi0.linear([0.0]))

    def __post_init__(self):
        self._law = GaussianTarget(self.mean, self.covariance)
        self.mean = self._law.mean
        self.covariance = self._law.covariance
        if self.phi0.dim != self._law.dim:
            raise UsageError(f"phi0 has dimension {self.phi0.dim}, initial law has {self._law.dim}")

    @property
    def dim(self) -> int:
        return self._law.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """
        Draw n i.i.d. positions from rho_0.

        Args:
            n: Number of particles, n >= 1.
            rng: Seeded generator; equal seeds give equal draws.

        Returns:
            np.ndarray: Positions, shape (n, d).
        """
        if n < 1:
            raise UsageError(f"number of particles must be >= 1, got {n}")
        return self._law.sample(n, rng)

    def initial_momentum(self, x: np.ndarray) -> np.ndarray:
        """Return grad phi_0(x) with the shape of `x`."""
        return self.phi0.gradient(x)


def sample_initial(init: GaussianInitial, n: int, rng: np.random.Generator) -> np.ndarray:
    return init.sample(n, rng)


def initial_momentum(init: GaussianInitial, x: np.ndarray) -> np.ndarray:
    return init.initial_momentum(x)

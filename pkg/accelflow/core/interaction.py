"""
Empirical approximations of the interaction term I(x) ~ grad log rho_t(x).

Three estimators are provided: the Gaussian closure -Sigma^-1 (x - m), the
diffusion-map estimator with the data-dependent kernel
k_eps(x, y) = g_eps(x, y) / sqrt(sum_i g_eps(y, X^i)), and the plain
density-estimation (kernel mean-shift) estimator. Kernel sums include the
self term j = i.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from accelflow.core.errors import NumericalError, UsageError

logger = logging.getLogger(__name__)

# above this dimension squared distances use |x|^2 + |y|^2 - 2 x.y
EXPANDED_DISTANCE_MIN_DIM = 9


@dataclass(frozen=True)
class Ensemble:
    """
    Particle state {(X^i, Y^i)} at time t.

    Attributes:
        positions: X, shape (N, d).
        momenta: Y, shape (N, d).
        time: Current time t.
    """
    positions: np.ndarray
    momenta: np.ndarray
    time: float

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        momenta = np.asarray(self.momenta, dtype=float)
        if positions.ndim != 2 or positions.shape[0] < 1 or positions.shape[1] < 1:
            raise UsageError(f"positions must have shape (N, d) with N, d >= 1, got {positions.shape}")
        if momenta.shape != positions.shape:
            raise UsageError(f"momenta shape {momenta.shape} differs from positions shape {positions.shape}")
        if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(momenta)) and np.isfinite(self.time)):
            raise UsageError("ensemble has non-finite entries")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "momenta", momenta)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def at_rest(cls, positions: np.ndarray, time: float) -> "Ensemble":
        positions = np.asarray(positions, dtype=float)
        return cls(positions, np.zeros_like(positions), time)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def evolve(self, positions: np.ndarray, momenta: np.ndarray, time: float) -> "Ensemble":
        return replace(self, positions=positions, momenta=momenta, time=time)


def _positions(ens: Union[Ensemble, np.ndarray]) -> np.ndarray:
    if isinstance(ens, Ensemble):
        return ens.positions
    x = np.asarray(ens, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def empirical_moments(x: np.ndarray):
    """Empirical mean and unbiased (divisor N-1) covariance of the rows of x."""
    n = x.shape[0]
    if n < 2:
        raise UsageError(f"empirical covariance needs at least 2 particles, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    return mean, centered.T @ centered / (n - 1)


def default_jitter(covariance: np.ndarray) -> float:
    """Covariance regularization 1e-9 * trace(Sigma) / d."""
    return 1e-9 * float(np.trace(covariance)) / covariance.shape[0]


def regularized_factor(covariance: np.ndarray, jitter: Optional[float] = None):
    """
    Cholesky factor of Sigma + jitter * I.

    Raises:
        NumericalError: If the regularized covariance is not positive definite;
            the message names its smallest eigenvalue.
    """
    jitter = default_jitter(covariance) if jitter is None else jitter
    regularized = covariance + jitter * np.eye(covariance.shape[0])
    smallest = float(np.linalg.eigvalsh(regularized).min()) if np.all(np.isfinite(regularized)) else float("nan")
    if not smallest > 0:
        raise NumericalError(
            f"regularized empirical covariance is singular (smallest eigenvalue {smallest:.3e}); "
            f"increase interaction.jitter"
        )
    return cho_factor(regularized, lower=True)


def gaussian_interaction(ens: Union[Ensemble, np.ndarray], jitter: Optional[float] = None) -> np.ndarray:
    """
    Gaussian closure I(X^i) = -(Sigma + jitter I)^-1 (X^i - m).

    Args:
        ens: Ensemble or positions (N, d), N >= 2.
        jitter: Covariance regularization; defaults to 1e-9 * trace(Sigma) / d.

    Returns:
        np.ndarray: Interaction rows, shape (N, d); the rows sum to zero.
    """
    x = _positions(ens)
    mean, covariance = empirical_moments(x)
    factor = regularized_factor(covariance, jitter)
    return -cho_solve(factor, (x - mean).T).T


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    """Matrix of |X^i - X^j|^2, by direct differencing for d <= 8."""
    if x.shape[1] < EXPANDED_DISTANCE_MIN_DIM:
        return cdist(x, x, "sqeuclidean")
    norms = np.einsum("ij,ij->i", x, x)
    sq = norms[:, None] + norms[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(sq, 0.0)
    return np.maximum(sq, 0.0)


def gaussian_kernel_matrix(x: np.ndarray, epsilon: float) -> np.ndarray:
    """g_eps(X^i, X^j) = exp(-|X^i - X^j|^2 / (4 eps)), shape (N, N)."""
    if not epsilon > 0:
        raise UsageError(f"kernel bandwidth epsilon must be > 0, got {epsilon}")
    return np.exp(-pairwise_sq_distances(x) / (4.0 * epsilon))


def _kernel_mean_shift(x: np.ndarray, kernel: np.ndarray, epsilon: float) -> np.ndarray:
    row_sums = kernel.sum(axis=1)
    bad = np.flatnonzero(~(row_sums > 0) | ~np.isfinite(row_sums))
    if bad.size:
        raise NumericalError(
            f"kernel row sum underflowed at particle {int(bad[0])} (epsilon={epsilon:g}); "
            f"use a larger epsilon"
        )
    weighted = kernel @ x - row_sums[:, None] * x
    return weighted / row_sums[:, None]


def diffusion_map_interaction(ens: Union[Ensemble, np.ndarray], epsilon: float) -> np.ndarray:
    """
    Diffusion-map estimate of grad log rho at every particle.

    I(X^i) = (1/eps) sum_j k(X^i, X^j)(X^j - X^i) / sum_j k(X^i, X^j), where
    k(x, y) = g(x, y) / sqrt(sum_i g(y, X^i)) normalizes by the second argument.

    Args:
        ens: Ensemble or positions (N, d).
        epsilon: Kernel bandwidth, > 0.

    Returns:
        np.ndarray: Interaction rows, shape (N, d).
    """
    x = _positions(ens)
    g = gaussian_kernel_matrix(x, epsilon)
    column_sums = g.sum(axis=0)
    kernel = g / np.sqrt(column_sums)[None, :]
    return _kernel_mean_shift(x, kernel, epsilon) / epsilon


def density_estimation_interaction(ens: Union[Ensemble, np.ndarray], epsilon: float) -> np.ndarray:
    """
    Kernel density estimate of grad log rho: (1/(2 eps)) times the g_eps mean shift.

    Args:
        ens: Ensemble or positions (N, d).
        epsilon: Kernel bandwidth, > 0.

    Returns:
        np.ndarray: Interaction rows, shape (N, d).
    """
    x = _positions(ens)
    g = gaussian_kernel_matrix(x, epsilon)
    return _kernel_mean_shift(x, g, epsilon) / (2.0 * epsilon)


class InteractionKind(Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"
    DIFFUSION_MAP = "dm"
    DENSITY_ESTIMATION = "de"


@dataclass(frozen=True)
class InteractionApproximator:
    """
    Strategy computing I(X^i) from the ensemble.

    Attributes:
        kind: Estimator family.
        epsilon: Kernel bandwidth (dm / de only).
        jitter: Covariance regularization (gaussian only); None selects the
            trace-scaled default.
    """
    kind: InteractionKind = InteractionKind.NONE
    epsilon: Optional[float] = None
    jitter: Optional[float] = None

    def __post_init__(self):
        if self.kind in (InteractionKind.DIFFUSION_MAP, InteractionKind.DENSITY_ESTIMATION):
            if self.epsilon is None or not self.epsilon > 0:
                raise UsageError(f"{self.kind.value} interaction needs epsilon > 0, got {self.epsilon}")
        if self.jitter is not None and self.jitter < 0:
            raise UsageError(f"interaction jitter must be >= 0, got {self.jitter}")

    @property
    def is_none(self) -> bool:
        return self.kind is InteractionKind.NONE

    def apply(self, ens: Union[Ensemble, np.ndarray]) -> np.ndarray:
        """
        Evaluate the selected estimator at every particle.

        Returns:
            np.ndarray: Shape (N, d); zeros for kind `none`.
        """
        if self.kind is InteractionKind.GAUSSIAN:
            return gaussian_interaction(ens, self.jitter)
        if self.kind is InteractionKind.DIFFUSION_MAP:
            return diffusion_map_interaction(ens, self.epsilon)
        if self.kind is InteractionKind.DENSITY_ESTIMATION:
            return density_estimation_interaction(ens, self.epsilon)
        return np.zeros_like(_positions(ens))

    def describe(self) -> str:
        if self.kind in (InteractionKind.DIFFUSION_MAP, InteractionKind.DENSITY_ESTIMATION):
            return f"{self.kind.value}(epsilon={self.epsilon:g})"
        return self.kind.value


def apply(approx: InteractionApproximator, ens: Union[Ensemble, np.ndarray]) -> np.ndarray:
    return approx.apply(ens)

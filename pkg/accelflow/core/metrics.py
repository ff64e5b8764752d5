"""
Diagnostics and oracles: KL estimates, the Lyapunov energy, the 1-d Gaussian
transport map, the Monte Carlo m.s.e., rate slopes and per-iteration timing.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import linregress
from sklearn.neighbors import KernelDensity

from accelflow.core.errors import CapabilityError, CoverageError, DomainError, NumericalError, UsageError
from accelflow.core.interaction import Ensemble, empirical_moments, regularized_factor
from accelflow.core.schedule import ScalingSchedule
from accelflow.core.targets import GaussianMixtureTarget, GaussianTarget, Observable, Target

logger = logging.getLogger(__name__)

MIN_KDE_GRID_MASS = 0.999
MAX_KDE_GRID_POINTS = 200_001


@dataclass
class RunRecord:
    """Per-iteration diagnostics of one run; absent metrics stay None."""
    iteration: int
    time_t: float
    kl_estimate: Optional[float] = None
    lyapunov: Optional[float] = None
    mse_contrib: Optional[float] = None
    wall_nanos: int = 0
    config_digest: str = ""
    scheme: str = ""


@dataclass
class MseAccumulator:
    """Per-run estimates (1/N) sum_i psi(X^{i,m}) at one iteration, against the exact value."""
    truth: float
    per_run_estimates: List[float] = field(default_factory=list)

    def add(self, estimate: float) -> None:
        self.per_run_estimates.append(float(estimate))

    def add_positions(self, positions: np.ndarray, observable: Observable) -> None:
        self.add(float(np.mean(observable.evaluate(positions))))

    def mse(self) -> float:
        return mse(self)


@dataclass(frozen=True)
class AffineMap:
    """x -> shift + scale * x."""
    shift: float
    scale: float

    def __call__(self, x):
        return self.shift + self.scale * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class TimingSummary:
    mean_nanos: float
    p50_nanos: float
    p95_nanos: float


def _require_gaussian_1d(target: Target) -> GaussianTarget:
    if not isinstance(target, GaussianTarget) or target.dim != 1:
        raise CapabilityError("this diagnostic requires a one-dimensional Gaussian target")
    return target


def kl_gaussian_fit(positions: np.ndarray, target: GaussianTarget, jitter: Optional[float] = None) -> float:
    """
    KL(N(m, Sigma) || N(x_bar, Q)) for the Gaussian fitted to the particles.

    Args:
        positions: Particles, shape (N, d) with N >= d + 2.
        target: Gaussian target.
        jitter: Covariance regularization, as for the Gaussian interaction.

    Returns:
        float: 1/2 [tr(Q^-1 Sigma) + (x_bar - m)^T Q^-1 (x_bar - m) - d + log(det Q / det Sigma)]
    """
    if not isinstance(target, GaussianTarget):
        raise CapabilityError("Gaussian-fit KL requires a Gaussian target")
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    n, d = x.shape
    if n < d + 2:
        raise UsageError(f"Gaussian-fit KL needs N >= d + 2 particles, got N={n}, d={d}")
    mean, covariance = empirical_moments(x)
    lower = np.tril(regularized_factor(covariance, jitter)[0])
    sigma = lower @ lower.T
    precision = target.precision
    diff = target.mean - mean
    log_det_sigma = 2.0 * float(np.sum(np.log(np.diag(lower))))
    log_det_q = float(np.linalg.slogdet(target.covariance)[1])
    kl = 0.5 * (float(np.trace(precision @ sigma)) + float(diff @ precision @ diff) - d + log_det_q - log_det_sigma)
    # round-off can push an exact match a hair below zero
    return max(kl, 0.0)


def silverman_bandwidth(positions: np.ndarray) -> float:
    """Rule-of-thumb bandwidth 1.06 * std * N^(-1/5) for a 1-d Gaussian KDE."""
    x = np.asarray(positions, dtype=float).reshape(-1)
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    if not std > 0:
        raise NumericalError("rule-of-thumb bandwidth is zero: all particles coincide")
    return 1.06 * std * x.size ** (-0.2)


def component_bandwidth(target: Target, n: int) -> float:
    """
    Rule-of-thumb bandwidth sized to the target's components (d = 1).

    For a mixture of k components each mode holds about n/k particles, so
    1.06 * sigma_c * (n/k)^(-1/5) with sigma_c the weighted component std.
    A pooled rule-of-thumb bandwidth over-smooths a bimodal cloud.
    """
    if target.dim != 1:
        raise CapabilityError("component bandwidth is implemented for d=1")
    if n < 1:
        raise UsageError(f"component bandwidth needs n >= 1, got {n}")
    if isinstance(target, GaussianMixtureTarget):
        variance = float(sum(w * c.covariance[0, 0] for w, c in zip(target.weights, target.components)))
        per_mode = n / len(target.components)
    elif isinstance(target, GaussianTarget):
        variance, per_mode = float(target.covariance[0, 0]), float(n)
    else:
        raise CapabilityError("component bandwidth needs a Gaussian or Gaussian-mixture target")
    return 1.06 * math.sqrt(variance) * per_mode ** (-0.2)


def kde_bandwidth(positions: np.ndarray, target: Target, rule: str = "silverman") -> float:
    """Bandwidth for `kl_kde` under a named rule: 'silverman' or 'component'."""
    if rule == "silverman":
        return silverman_bandwidth(positions)
    if rule == "component":
        return component_bandwidth(target, np.asarray(positions).reshape(-1).size)
    raise UsageError(f"unknown KDE bandwidth rule '{rule}'")


def kl_kde(positions: np.ndarray, target: Target, bandwidth: Optional[float] = None,
           grid_points: int = 4001, rule: str = "silverman") -> float:
    """
    KL(rho_hat || rho_inf) with rho_hat a Gaussian KDE of the particles (d = 1).

    The integral is a trapezoid rule over a grid covering both the particles
    (8 bandwidths beyond the extremes) and the bulk of the target.

    Args:
        positions: Particles, shape (N, 1).
        target: One-dimensional target.
        bandwidth: KDE bandwidth; overrides `rule` when set.
        grid_points: Minimum number of grid points.
        rule: Bandwidth rule used when `bandwidth` is None.

    Returns:
        float: The KL estimate.

    Raises:
        CoverageError: If rho_hat integrates below 0.999 on the grid.
    """
    if target.dim != 1:
        raise CapabilityError("KDE-based KL is implemented for d=1")
    x = np.asarray(positions, dtype=float).reshape(-1, 1)
    h = kde_bandwidth(x, target, rule) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DomainError(f"KDE bandwidth must be > 0, got {h}")

    reference = target.sample(2000, np.random.Generator(np.random.Philox(0)))
    lo = min(float(x.min()) - 8.0 * h, float(np.quantile(reference, 1e-4)))
    hi = max(float(x.max()) + 8.0 * h, float(np.quantile(reference, 1.0 - 1e-4)))
    spacing = min(h / 4.0, (hi - lo) / (grid_points - 1))
    count = min(int(math.ceil((hi - lo) / spacing)) + 1, MAX_KDE_GRID_POINTS)
    grid = np.linspace(lo, hi, count).reshape(-1, 1)

    kde = KernelDensity(kernel="gaussian", bandwidth=h).fit(x)
    log_rho_hat = kde.score_samples(grid)
    rho_hat = np.exp(log_rho_hat)
    mass = float(trapezoid(rho_hat, grid[:, 0]))
    if mass < MIN_KDE_GRID_MASS:
        raise CoverageError(f"KDE mass on the quadrature grid is {mass:.6f} < {MIN_KDE_GRID_MASS}")
    integrand = np.where(rho_hat > 0, rho_hat * (log_rho_hat - target.log_density(grid)), 0.0)
    logger.debug(f"KDE-KL with bandwidth {h:.4g} on {count} grid points")
    return float(trapezoid(integrand, grid[:, 0]))


def ot_map_gaussian_1d(m: float, var: float, target: GaussianTarget) -> AffineMap:
    """
    Optimal transport map from N(m, var) to a 1-d Gaussian target.

    Returns:
        AffineMap: T(x) = x_bar + sqrt(Q / var) (x - m)
    """
    target = _require_gaussian_1d(target)
    if not var > 0:
        raise DomainError(f"source variance must be > 0, got {var}")
    scale = math.sqrt(float(target.covariance[0, 0]) / var)
    return AffineMap(shift=float(target.mean[0]) - scale * m, scale=scale)


def _empirical_map(ens: Ensemble, target: GaussianTarget) -> AffineMap:
    mean, covariance = empirical_moments(ens.positions)
    return ot_map_gaussian_1d(float(mean[0]), float(covariance[0, 0]), target)


def lyapunov_energy(ens: Ensemble, schedule: ScalingSchedule, target: GaussianTarget,
                    functional_gap: float) -> float:
    """
    Lyapunov energy V(t) = (1/N) sum_i 1/2 |X^i + e^-gamma_t Y^i - T(X^i)|^2 + e^beta_t * gap.

    `functional_gap` is the current relative-entropy value F(rho_t) - F(rho_inf);
    F(rho_inf) = 0 for the relative entropy. T is the transport map computed
    from the empirical moments.
    """
    transport = _empirical_map(ens, target)
    x = ens.positions[:, 0]
    residual = x + schedule.momentum_weight(ens.time) * ens.momenta[:, 0] - transport(x)
    return float(np.mean(0.5 * residual ** 2)) + schedule.energy_weight(ens.time) * functional_gap


def transport_assumption_proxy(previous: Ensemble, current: Ensemble, schedule: ScalingSchedule,
                               target: GaussianTarget) -> float:
    """
    Finite-difference proxy of E[(X + e^-gamma Y - T(X)) . dT/dt(X)].

    dT/dt is replaced by (T_t - T_{t-dt}) / dt evaluated at the current positions.
    """
    dt = current.time - previous.time
    if not dt > 0:
        raise UsageError("transport proxy needs increasing times")
    t_now = _empirical_map(current, target)
    t_before = _empirical_map(previous, target)
    x = current.positions[:, 0]
    residual = x + schedule.momentum_weight(current.time) * current.momenta[:, 0] - t_now(x)
    return float(np.mean(residual * (t_now(x) - t_before(x)) / dt))


def mse(acc: MseAccumulator) -> float:
    """(1/M) sum_m (estimate_m - truth)^2."""
    if not acc.per_run_estimates:
        raise UsageError("m.s.e. of an empty accumulator")
    if not math.isfinite(acc.truth):
        raise UsageError(f"m.s.e. truth must be finite, got {acc.truth}")
    errors = np.asarray(acc.per_run_estimates) - acc.truth
    return float(np.mean(errors ** 2))


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise DomainError("log-log slope needs positive values")
    if x.size < 2:
        raise UsageError("log-log slope needs at least 2 points")
    return float(linregress(np.log(x), np.log(y)).slope)


def rate_slope(series: Iterable[Tuple[float, float]], window: Tuple[float, float]) -> float:
    """
    Log-log slope of a decay series over a time window.

    Args:
        series: (t, value) pairs.
        window: (t_lo, t_hi), inclusive.

    Returns:
        float: Slope, to be compared with the predicted -p.
    """
    data = np.asarray(list(series), dtype=float).reshape(-1, 2)
    t_lo, t_hi = window
    inside = data[(data[:, 0] >= t_lo) & (data[:, 0] <= t_hi)]
    if inside.shape[0] < 10:
        raise UsageError(f"rate slope needs >= 10 points in window {window}, got {inside.shape[0]}")
    if np.any(inside[:, 1] <= 0):
        raise DomainError(f"rate slope needs positive values in window {window}")
    return loglog_slope(inside[:, 0], inside[:, 1])


def upper_envelope(values: Sequence[float]) -> np.ndarray:
    """Running maximum taken from the right: out[k] = max(values[k:])."""
    v = np.asarray(values, dtype=float)
    return np.maximum.accumulate(v[::-1])[::-1]


def wall_time_per_iteration(records: Sequence[RunRecord]) -> TimingSummary:
    """
    Mean, median and 95th percentile of per-iteration wall time.

    Every record is a real step; sampler setup runs before the first timed
    iteration and is in none of them.
    """
    if not records:
        raise UsageError("timing summary needs at least 1 iteration")
    nanos = np.asarray([r.wall_nanos for r in records], dtype=float)
    return TimingSummary(
        mean_nanos=float(nanos.mean()),
        p50_nanos=float(np.percentile(nanos, 50)),
        p95_nanos=float(np.percentile(nanos, 95)),
    )


class RecordBuilder:
    """
    Run hook filling the optional diagnostics of each RunRecord.

    Args:
        target: Target distribution.
        schedule: Schedule, required for the Lyapunov energy.
        kl_estimator: 'gaussian_fit', 'kde' or 'none'.
        observable: Test function for the m.s.e. contribution (None disables it).
        truth: Exact expectation of `observable`.
        lyapunov: Whether to record the Lyapunov energy (1-d Gaussian targets).
        kde_bandwidth: Fixed KDE bandwidth; None applies `kde_rule` per call.
        kde_rule: 'silverman' or 'component'.
    """

    def __init__(self, target: Target, schedule: Optional[ScalingSchedule] = None,
                 kl_estimator: str = "none", observable: Optional[Observable] = None,
                 truth: Optional[float] = None, lyapunov: bool = False,
                 kde_bandwidth: Optional[float] = None, kde_rule: str = "silverman"):
        self.target = target
        self.schedule = schedule
        self.kl_estimator = kl_estimator
        self.observable = observable
        self.truth = truth
        self.lyapunov = lyapunov and schedule is not None and isinstance(target, GaussianTarget) and target.dim == 1
        self.kde_bandwidth = kde_bandwidth
        self.kde_rule = kde_rule
        self._previous: Optional[Ensemble] = None

    def kl(self, positions: np.ndarray) -> Optional[float]:
        if self.kl_estimator == "gaussian_fit":
            return kl_gaussian_fit(positions, self.target)
        if self.kl_estimator == "kde":
            return kl_kde(positions, self.target, self.kde_bandwidth, rule=self.kde_rule)
        return None

    def __call__(self, record: RunRecord, ens: Ensemble) -> None:
        record.kl_estimate = self.kl(ens.positions)
        if self.lyapunov:
            gap = record.kl_estimate if record.kl_estimate is not None else kl_gaussian_fit(ens.positions, self.target)
            record.lyapunov = lyapunov_energy(ens, self.schedule, self.target, gap)
            if self._previous is not None and logger.isEnabledFor(logging.DEBUG):
                proxy = transport_assumption_proxy(self._previous, ens, self.schedule, self.target)
                logger.debug(f"iteration {record.iteration}: transport assumption proxy {proxy:.6g}")
            self._previous = ens
        if self.observable is not None and self.truth is not None:
            estimate = float(np.mean(self.observable.evaluate(ens.positions)))
            record.mse_contrib = (estimate - self.truth) ** 2

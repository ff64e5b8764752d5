"""
Time-steppers: the interacting-particle accelerated flow (kick-drift-kick),
the Nesterov ODE it reduces to for one particle without interaction, the
damped accelerated flow with constant friction, and the baseline samplers
(overdamped Langevin, underdamped Langevin, deterministic first-order flow).

All samplers share `run_sampler`, which times every iteration and hands each
RunRecord to the diagnostic hooks before yielding it.
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from accelflow.core.errors import DivergenceError, UsageError
from accelflow.core.interaction import Ensemble, InteractionApproximator
from accelflow.core.metrics import RunRecord
from accelflow.core.schedule import ScalingSchedule
from accelflow.core.targets import Target

logger = logging.getLogger(__name__)

Hook = Callable[[RunRecord, Ensemble], None]


class MomentumUpdate(Enum):
    """Momentum used in the position drift: Y_k as printed, or the leapfrog Y_{k+1/2}."""
    PAPER_VERBATIM = "paper"
    HALF_STEP = "halfstep"


class LangevinKind(Enum):
    OVERDAMPED = "overdamped"
    UNDERDAMPED = "underdamped"
    DETERMINISTIC_FIRST_ORDER = "deterministic_first_order"
    DAMPED_FLOW = "damped_flow"


@dataclass(frozen=True)
class AcceleratedStepperConfig:
    schedule: ScalingSchedule = field(default_factory=ScalingSchedule)
    dt: float = 0.1
    x_update_momentum: MomentumUpdate = MomentumUpdate.PAPER_VERBATIM
    approx: InteractionApproximator = field(default_factory=InteractionApproximator)

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError(f"step size dt must be > 0, got {self.dt}")

    @property
    def scheme(self) -> str:
        return f"kick-drift-kick[{self.x_update_momentum.value}]"


@dataclass(frozen=True)
class LangevinConfig:
    dt: float = 0.1
    kind: LangevinKind = LangevinKind.OVERDAMPED
    gamma_friction: float = 2.0
    approx: InteractionApproximator = field(default_factory=InteractionApproximator)

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError(f"step size dt must be > 0, got {self.dt}")
        if self.kind in (LangevinKind.UNDERDAMPED, LangevinKind.DAMPED_FLOW) and not self.gamma_friction > 0:
            raise UsageError(f"friction gamma must be > 0, got {self.gamma_friction}")
        if self.kind in (LangevinKind.DETERMINISTIC_FIRST_ORDER, LangevinKind.DAMPED_FLOW) and self.approx.is_none:
            raise UsageError(f"{self.kind.value} flow needs an interaction approximation")


def _check_finite(iteration: Optional[int], *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite particle state at iteration {iteration}", iteration=iteration)


def _kick_drift_kick(x: np.ndarray, y: np.ndarray, t: float, schedule: ScalingSchedule, dt: float,
                     force: Callable[[np.ndarray], np.ndarray],
                     x_update: MomentumUpdate) -> Tuple[np.ndarray, np.ndarray, float]:
    # one iteration of the symplectic scheme; `force` is grad f + I
    t_half = t + 0.5 * dt
    force_coeff = schedule.force_coeff(t_half)
    y_half = y - 0.5 * force_coeff * force(x) * dt
    drift_momentum = y if x_update is MomentumUpdate.PAPER_VERBATIM else y_half
    x_next = x + schedule.velocity_coeff(t_half) * drift_momentum * dt
    y_next = y_half - 0.5 * force_coeff * force(x_next) * dt
    return x_next, y_next, t_half + 0.5 * dt


def accelerated_step(ens: Ensemble, cfg: AcceleratedStepperConfig, target: Target,
                     iteration: Optional[int] = None) -> Ensemble:
    """
    One iteration of the interacting-particle accelerated flow.

    The interaction is evaluated at X_k for the first half-kick and at X_{k+1}
    for the second, i.e. twice per call.

    Args:
        ens: Current ensemble (X_k, Y_k, t_k).
        cfg: Stepper configuration.
        target: Target distribution.
        iteration: Index reported if the step diverges.

    Returns:
        Ensemble: (X_{k+1}, Y_{k+1}, t_{k+1}).

    Raises:
        DivergenceError: If the new state has a non-finite coordinate.
    """
    if cfg.approx.is_none:
        force = target.grad_potential
    else:
        def force(x: np.ndarray) -> np.ndarray:
            return target.grad_potential(x) + cfg.approx.apply(x)
    x, y, t = _kick_drift_kick(ens.positions, ens.momenta, ens.time, cfg.schedule, cfg.dt, force,
                               cfg.x_update_momentum)
    _check_finite(iteration, x, y)
    return ens.evolve(x, y, t)


def nesterov_ode_step(x: np.ndarray, y: np.ndarray, t: float, schedule: ScalingSchedule, target: Target,
                      dt: float, x_update: MomentumUpdate = MomentumUpdate.PAPER_VERBATIM,
                      iteration: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    One symplectic step of dX/dt = e^(alpha-gamma) Y, dY/dt = -e^(alpha+beta+gamma) grad f(X).

    Uses the same staging as the particle flow with no interaction.
    """
    if t < schedule.t0:
        raise UsageError(f"Nesterov step requested at t={t} before t0={schedule.t0}")
    x_next, y_next, t_next = _kick_drift_kick(np.asarray(x, dtype=float), np.asarray(y, dtype=float), t,
                                              schedule, dt, target.grad_potential, x_update)
    _check_finite(iteration, x_next, y_next)
    return x_next, y_next, t_next


def run_nesterov(x0: np.ndarray, y0: np.ndarray, schedule: ScalingSchedule, target: Target, dt: float,
                 K: int, x_update: MomentumUpdate = MomentumUpdate.PAPER_VERBATIM
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Integrate the Nesterov ODE for K steps from t0.

    Returns:
        Tuple of arrays (t, x, y) with K + 1 rows, row 0 the initial state.
    """
    if K < 1:
        raise UsageError(f"iteration count K must be >= 1, got {K}")
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    y = np.atleast_1d(np.asarray(y0, dtype=float))
    t = schedule.t0
    times, xs, ys = [t], [x], [y]
    for k in range(K):
        x, y, t = nesterov_ode_step(x, y, t, schedule, target, dt, x_update, iteration=k + 1)
        times.append(t)
        xs.append(x)
        ys.append(y)
    return np.asarray(times), np.asarray(xs), np.asarray(ys)


def langevin_step(positions: np.ndarray, dt: float, target: Target, rng: np.random.Generator,
                  noise_scale: float = 1.0, iteration: Optional[int] = None) -> np.ndarray:
    """
    Euler-Maruyama step of dX = -grad f(X) dt + sqrt(2) dB.

    Args:
        positions: Particles (N, d).
        dt: Step size, > 0.
        target: Target distribution.
        rng: Noise generator.
        noise_scale: Multiplies the Brownian increment; 0 gives gradient descent.

    Returns:
        np.ndarray: New positions.
    """
    if not dt > 0:
        raise UsageError(f"step size dt must be > 0, got {dt}")
    noise = rng.standard_normal(positions.shape)
    out = positions - target.grad_potential(positions) * dt + noise_scale * np.sqrt(2.0 * dt) * noise
    _check_finite(iteration, out)
    return out


def underdamped_step(positions: np.ndarray, velocities: np.ndarray, dt: float, gamma_friction: float,
                     target: Target, rng: np.random.Generator, noise_scale: float = 1.0,
                     iteration: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Euler-Maruyama step of dX = v dt, dv = -gamma v dt - grad f(X) dt + sqrt(2) dB.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (positions, velocities)
    """
    if not dt > 0:
        raise UsageError(f"step size dt must be > 0, got {dt}")
    if gamma_friction < 0:
        raise UsageError(f"friction gamma must be >= 0, got {gamma_friction}")
    noise = rng.standard_normal(positions.shape)
    x_next = positions + velocities * dt
    v_next = (velocities - gamma_friction * velocities * dt - target.grad_potential(positions) * dt
              + noise_scale * np.sqrt(2.0 * dt) * noise)
    _check_finite(iteration, x_next, v_next)
    return x_next, v_next


def deterministic_first_order_step(positions: np.ndarray, dt: float, target: Target,
                                   approx: InteractionApproximator,
                                   iteration: Optional[int] = None) -> np.ndarray:
    """Explicit Euler step of dX = -(grad f(X) + I(X)) dt."""
    if approx.is_none:
        raise UsageError("deterministic first-order flow needs an interaction approximation")
    if not dt > 0:
        raise UsageError(f"step size dt must be > 0, got {dt}")
    out = positions - (target.grad_potential(positions) + approx.apply(positions)) * dt
    _check_finite(iteration, out)
    return out


def damped_flow_step(positions: np.ndarray, velocities: np.ndarray, dt: float, gamma_friction: float,
                     target: Target, approx: InteractionApproximator,
                     iteration: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Explicit Euler step of dX = v dt, dv = -gamma v dt - (grad f(X) + I(X)) dt.

    The accelerated flow with constant friction: underdamped Langevin with the
    Brownian forcing replaced by the interaction term, staged like
    `underdamped_step`.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (positions, velocities)
    """
    if approx.is_none:
        raise UsageError("damped accelerated flow needs an interaction approximation")
    if not dt > 0:
        raise UsageError(f"step size dt must be > 0, got {dt}")
    if gamma_friction < 0:
        raise UsageError(f"friction gamma must be >= 0, got {gamma_friction}")
    x_next = positions + velocities * dt
    v_next = (velocities - gamma_friction * velocities * dt
              - (target.grad_potential(positions) + approx.apply(positions)) * dt)
    _check_finite(iteration, x_next, v_next)
    return x_next, v_next


class Sampler:
    """A stepper over Ensembles; momenta hold velocities (or zeros) for baseline samplers."""

    name: str = "sampler"
    scheme: str = ""

    def prepare(self, initial: Ensemble) -> None:
        """Validate preconditions on the initial ensemble before the first step."""

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        raise NotImplementedError


class AcceleratedSampler(Sampler):
    name = "accelerated"

    def __init__(self, cfg: AcceleratedStepperConfig, target: Target):
        self.cfg = cfg
        self.target = target
        self.scheme = cfg.scheme
        if not cfg.approx.is_none:
            self.name = f"accelerated_{cfg.approx.kind.value}"

    def prepare(self, initial: Ensemble) -> None:
        # I_0 at the initial positions; surfaces interaction preconditions early.
        # Not reused by step(): a run costs 2K + 1 evaluations and each timed
        # iteration holds two.
        self.cfg.approx.apply(initial)

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        return accelerated_step(ens, self.cfg, self.target, iteration)


class NesterovSampler(AcceleratedSampler):
    """Every particle follows its own Nesterov ODE (accelerated flow without interaction)."""
    name = "nesterov"

    def __init__(self, cfg: AcceleratedStepperConfig, target: Target):
        super().__init__(AcceleratedStepperConfig(cfg.schedule, cfg.dt, cfg.x_update_momentum), target)


class OverdampedLangevinSampler(Sampler):
    name = "mcmc"
    scheme = "euler-maruyama"

    def __init__(self, cfg: LangevinConfig, target: Target, rng: np.random.Generator):
        self.cfg = cfg
        self.target = target
        self.rng = rng

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        x = langevin_step(ens.positions, self.cfg.dt, self.target, self.rng, iteration=iteration)
        return ens.evolve(x, ens.momenta, ens.time + self.cfg.dt)


class UnderdampedLangevinSampler(Sampler):
    name = "hmcmc"
    scheme = "euler-maruyama"

    def __init__(self, cfg: LangevinConfig, target: Target, rng: np.random.Generator):
        self.cfg = cfg
        self.target = target
        self.rng = rng

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        x, v = underdamped_step(ens.positions, ens.momenta, self.cfg.dt, self.cfg.gamma_friction,
                                self.target, self.rng, iteration=iteration)
        return ens.evolve(x, v, ens.time + self.cfg.dt)


class FirstOrderSampler(Sampler):
    name = "first_order_det"
    scheme = "explicit-euler"

    def __init__(self, cfg: LangevinConfig, target: Target):
        self.cfg = cfg
        self.target = target

    def prepare(self, initial: Ensemble) -> None:
        self.cfg.approx.apply(initial)

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        x = deterministic_first_order_step(ens.positions, self.cfg.dt, self.target, self.cfg.approx, iteration)
        return ens.evolve(x, ens.momenta, ens.time + self.cfg.dt)


class DampedFlowSampler(Sampler):
    name = "damped_flow"
    scheme = "explicit-euler"

    def __init__(self, cfg: LangevinConfig, target: Target):
        self.cfg = cfg
        self.target = target

    def prepare(self, initial: Ensemble) -> None:
        self.cfg.approx.apply(initial)

    def step(self, ens: Ensemble, iteration: int) -> Ensemble:
        x, v = damped_flow_step(ens.positions, ens.momenta, self.cfg.dt, self.cfg.gamma_friction, self.target,
                                self.cfg.approx, iteration)
        return ens.evolve(x, v, ens.time + self.cfg.dt)


def run_sampler(sampler: Sampler, initial: Ensemble, K: int, hooks: Sequence[Hook] = (),
                config_digest: str = "", on_state: Optional[Callable[[int, Ensemble], None]] = None
                ) -> Iterator[RunRecord]:
    """
    Iterate a sampler K times, yielding one RunRecord per iteration.

    Args:
        sampler: Stepper to iterate.
        initial: Ensemble at t0.
        K: Number of iterations, >= 1.
        hooks: Called as hook(record, ensemble) after every step, in order.
        config_digest: Digest of the resolved configuration stored in each record.
        on_state: Optional observer receiving (iteration, ensemble).

    Yields:
        RunRecord: Records for iterations 1..K.
    """
    if K < 1:
        raise UsageError(f"iteration count K must be >= 1, got {K}")
    sampler.prepare(initial)
    return _iterate(sampler, initial, K, hooks, config_digest, on_state)


def _iterate(sampler: Sampler, initial: Ensemble, K: int, hooks: Sequence[Hook], config_digest: str,
             on_state: Optional[Callable[[int, Ensemble], None]]) -> Iterator[RunRecord]:
    ens = initial
    for k in range(1, K + 1):
        started = time.perf_counter_ns()
        ens = sampler.step(ens, k)
        elapsed = time.perf_counter_ns() - started
        record = RunRecord(iteration=k, time_t=ens.time, wall_nanos=max(int(elapsed), 0),
                           config_digest=config_digest, scheme=sampler.scheme)
        for hook in hooks:
            hook(record, ens)
        if on_state is not None:
            on_state(k, ens)
        yield record


def run_accelerated(initial: Ensemble, cfg: AcceleratedStepperConfig, target: Target, K: int,
                    hooks: Sequence[Hook] = (), config_digest: str = "") -> Iterator[RunRecord]:
    """Algorithm loop of the accelerated flow: K iterations from the initial ensemble."""
    return run_sampler(AcceleratedSampler(cfg, target), initial, K, hooks, config_digest)


def collect_states(sampler: Sampler, initial: Ensemble, K: int) -> List[Ensemble]:
    """Run a sampler and keep every ensemble (index 0 is the initial one)."""
    states = [initial]
    for _ in run_sampler(sampler, initial, K, on_state=lambda k, ens: states.append(ens)):
        pass
    return states

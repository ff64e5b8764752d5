"""
Builds the numerical objects (target, initial law, interaction, sampler,
diagnostics hook) described by an ExperimentConfig.
"""
import logging
from typing import List, Sequence

import numpy as np

from accelflow.core.dynamics import (
    AcceleratedSampler,
    AcceleratedStepperConfig,
    DampedFlowSampler,
    FirstOrderSampler,
    LangevinConfig,
    LangevinKind,
    MomentumUpdate,
    NesterovSampler,
    OverdampedLangevinSampler,
    Sampler,
    UnderdampedLangevinSampler,
)
from accelflow.core.errors import UsageError
from accelflow.core.interaction import Ensemble, InteractionApproximator, InteractionKind
from accelflow.core.metrics import RecordBuilder
from accelflow.core.schedule import ScalingSchedule
from accelflow.core.targets import (
    GaussianInitial,
    GaussianMixtureTarget,
    GaussianTarget,
    Observable,
    Phi0,
    Target,
    expectation_truth,
    make_rng,
)
from accelflow.schemas.experiment import ExperimentConfig

logger = logging.getLogger(__name__)

# independent random streams of one run
INIT_STREAM = 0
NOISE_STREAM = 1
VELOCITY_STREAM = 2

ACCELERATED_KINDS = ("accelerated", "nesterov")


def covariance_matrix(entries: Sequence[float], dim: int, name: str) -> np.ndarray:
    """Read d diagonal entries or d*d row-major entries as a (d, d) matrix."""
    values = np.asarray(entries, dtype=float)
    if values.size == dim:
        return np.diag(values)
    if values.size == dim * dim:
        return values.reshape(dim, dim)
    raise UsageError(f"{name} needs {dim} or {dim * dim} entries for dimension {dim}, got {values.size}")


def parse_phi0(spec: str, dim: int) -> Phi0:
    """
    Parse `linear:<slope>[,...][:<offset>]` or `quadratic:<diag>[,...]`.

    A single slope or diagonal entry is broadcast to every coordinate.
    """
    kind, _, rest = spec.partition(":")
    fields = rest.split(":")
    try:
        values = [float(v) for v in fields[0].split(",") if v.strip()]
        offset = float(fields[1]) if kind == "linear" and len(fields) > 1 else 0.0
    except ValueError as e:
        raise UsageError(f"malformed phi0 '{spec}': {e}") from e
    if len(values) == 1:
        values = values * dim
    if len(values) != dim:
        raise UsageError(f"phi0 '{spec}' has {len(values)} coefficients for dimension {dim}")
    if kind == "linear":
        return Phi0.linear(values, offset)
    if kind == "quadratic":
        return Phi0.quadratic(np.diag(values))
    raise UsageError(f"unknown phi0 kind '{kind}'")


def build_schedule(cfg: ExperimentConfig) -> ScalingSchedule:
    return ScalingSchedule(p=cfg.schedule.p, C=cfg.schedule.C, t0=cfg.schedule.t0)


def build_target(cfg: ExperimentConfig) -> Target:
    if cfg.target.kind == "mixture":
        return GaussianMixtureTarget.symmetric(cfg.target.m, cfg.target.sigma2)
    dim = len(cfg.target.mean)
    return GaussianTarget(cfg.target.mean, covariance_matrix(cfg.target.cov, dim, "target.cov"))


def build_initial(cfg: ExperimentConfig) -> GaussianInitial:
    dim = len(cfg.init.mean)
    return GaussianInitial(
        mean=np.asarray(cfg.init.mean, dtype=float),
        covariance=covariance_matrix(cfg.init.cov, dim, "init.cov"),
        phi0=parse_phi0(cfg.init.phi0, dim),
    )


def build_approx(cfg: ExperimentConfig) -> InteractionApproximator:
    return InteractionApproximator(
        kind=InteractionKind(cfg.interaction.kind),
        epsilon=cfg.interaction.epsilon,
        jitter=cfg.interaction.jitter,
    )


def build_sampler(cfg: ExperimentConfig, target: Target, seed: int) -> Sampler:
    """Sampler for `dynamics.kind`; stochastic samplers draw noise from the run's noise stream."""
    dyn = cfg.dynamics
    if dyn.kind in ACCELERATED_KINDS:
        stepper = AcceleratedStepperConfig(
            schedule=build_schedule(cfg),
            dt=dyn.dt,
            x_update_momentum=MomentumUpdate(dyn.x_update),
            approx=build_approx(cfg),
        )
        if dyn.kind == "nesterov":
            return NesterovSampler(stepper, target)
        return AcceleratedSampler(stepper, target)
    if dyn.kind == "mcmc":
        return OverdampedLangevinSampler(LangevinConfig(dt=dyn.dt), target, make_rng(seed, NOISE_STREAM))
    if dyn.kind == "hmcmc":
        langevin = LangevinConfig(dt=dyn.dt, kind=LangevinKind.UNDERDAMPED, gamma_friction=dyn.gamma_friction)
        return UnderdampedLangevinSampler(langevin, target, make_rng(seed, NOISE_STREAM))
    if dyn.kind == "damped_flow":
        langevin = LangevinConfig(dt=dyn.dt, kind=LangevinKind.DAMPED_FLOW, gamma_friction=dyn.gamma_friction,
                                  approx=build_approx(cfg))
        return DampedFlowSampler(langevin, target)
    langevin = LangevinConfig(dt=dyn.dt, kind=LangevinKind.DETERMINISTIC_FIRST_ORDER, approx=build_approx(cfg))
    return FirstOrderSampler(langevin, target)


def initial_ensemble(cfg: ExperimentConfig, seed: int) -> Ensemble:
    """
    Seed-matched initial ensemble: every method draws X_0 from the same stream.

    Accelerated samplers start at t0 with Y_0 = grad phi_0(X_0); Langevin-type
    samplers start at t = 0 with zero velocities, or N(0, v0_scale^2)
    velocities for hmcmc and damped_flow.
    """
    initial = build_initial(cfg)
    positions = initial.sample(cfg.N, make_rng(seed, INIT_STREAM))
    if cfg.dynamics.kind in ACCELERATED_KINDS:
        return Ensemble(positions, initial.initial_momentum(positions), cfg.schedule.t0)
    if cfg.dynamics.kind in ("hmcmc", "damped_flow") and cfg.dynamics.v0_scale > 0:
        velocities = cfg.dynamics.v0_scale * make_rng(seed, VELOCITY_STREAM).standard_normal(positions.shape)
        return Ensemble(positions, velocities, 0.0)
    return Ensemble.at_rest(positions, 0.0)


def observable_truth(cfg: ExperimentConfig, target: Target) -> float:
    return expectation_truth(target, Observable(cfg.metrics.observable))


def build_record_builder(cfg: ExperimentConfig, target: Target, truth: float) -> RecordBuilder:
    accelerated = cfg.dynamics.kind in ACCELERATED_KINDS
    return RecordBuilder(
        target=target,
        schedule=build_schedule(cfg) if accelerated else None,
        kl_estimator=cfg.metrics.kl,
        observable=Observable(cfg.metrics.observable),
        truth=truth,
        lyapunov=cfg.metrics.lyapunov and accelerated,
        kde_bandwidth=cfg.metrics.kde_bandwidth,
        kde_rule=cfg.metrics.kde_rule,
    )


def method_config(cfg: ExperimentConfig, method: str) -> ExperimentConfig:
    """Configuration of one comparison method: accelerated_dm, accelerated_de, mcmc or hmcmc."""
    if method.startswith("accelerated_"):
        interaction = cfg.interaction.model_copy(update={"kind": method.split("_", 1)[1]})
        dynamics = cfg.dynamics.model_copy(update={"kind": "accelerated"})
        return cfg.model_copy(update={"interaction": interaction, "dynamics": dynamics})
    if method in ("mcmc", "hmcmc"):
        dynamics = cfg.dynamics.model_copy(update={"kind": method})
        interaction = cfg.interaction.model_copy(update={"kind": "none"})
        return cfg.model_copy(update={"interaction": interaction, "dynamics": dynamics})
    raise UsageError(f"unknown comparison method '{method}'")


def check_consistency(cfg: ExperimentConfig) -> List[tuple]:
    """
    Cross-section checks pydantic cannot express per field.

    Returns:
        List[tuple]: (dotted key path, message) for every violation.
    """
    problems = []
    dim = len(cfg.target.mean) if cfg.target.kind == "gaussian" else 1
    try:
        build_target(cfg)
    except (UsageError, ValueError) as e:
        problems.append(("target.cov", str(e)))
    if len(cfg.init.mean) != dim:
        problems.append(("init.mean", f"initial law has dimension {len(cfg.init.mean)}, target has {dim}"))
    else:
        try:
            build_initial(cfg)
        except (UsageError, ValueError) as e:
            key = "init.phi0" if "phi0" in str(e) else "init.cov"
            problems.append((key, str(e)))
    if cfg.metrics.kl == "gaussian_fit" and cfg.target.kind != "gaussian":
        problems.append(("metrics.kl", "gaussian_fit KL needs a gaussian target; use kde"))
    if cfg.metrics.kl == "kde" and dim != 1:
        problems.append(("metrics.kl", "kde KL is available for d=1 only"))
    if cfg.output.traces and dim != 1:
        problems.append(("output.traces", "particle traces are written for d=1 only"))
    if cfg.dynamics.kind in ("first_order_det", "damped_flow") and cfg.interaction.kind == "none":
        problems.append(("interaction.kind", f"{cfg.dynamics.kind} needs an interaction approximation"))
    for method in cfg.comparison.methods:
        if method in ("accelerated_dm", "accelerated_de") and cfg.interaction.epsilon is None \
                and cfg.preset == "comparison_fig3":
            problems.append(("interaction.epsilon", f"{method} needs interaction.epsilon"))
            break
    if cfg.dynamics.kind == "nesterov" and cfg.interaction.kind != "none":
        logger.warning(f"dynamics.kind=nesterov ignores interaction.kind={cfg.interaction.kind}")
    return problems

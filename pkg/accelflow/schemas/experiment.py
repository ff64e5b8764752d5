from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_list(value: Any) -> Any:
    """Accept `a,b,c` strings from the flat config format as lists."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleSettings(_Section):
    """Ideal-scaling parameters."""
    p: float = Field(2.0, ge=2, description="Rate exponent p")
    C: float = Field(0.625, gt=0, description="Scale C")
    t0: float = Field(1.0, gt=0, description="Start time t0")


class TargetSettings(_Section):
    """Target distribution rho_inf."""
    kind: Literal["gaussian", "mixture"] = Field("gaussian", description="Target family")
    mean: List[float] = Field(default_factory=lambda: [-5.0], description="Gaussian mean")
    cov: List[float] = Field(default_factory=lambda: [0.25],
                             description="Gaussian covariance: d diagonal entries or d*d row-major entries")
    m: float = Field(2.0, description="Mixture component offset (components at -m and +m)")
    sigma2: float = Field(0.8, gt=0, description="Mixture component variance")

    _split = field_validator("mean", "cov", mode="before")(_split_list)


class InitSettings(_Section):
    """Initial law rho_0 and phi_0."""
    mean: List[float] = Field(default_factory=lambda: [2.0], description="Initial mean")
    cov: List[float] = Field(default_factory=lambda: [4.0], description="Initial covariance (diagonal or full)")
    phi0: str = Field("linear:0.5:-1.0",
                      description="`linear:<slope>[,<slope>...]:<offset>` or `quadratic:<diag>[,<diag>...]`")

    _split = field_validator("mean", "cov", mode="before")(_split_list)

    @field_validator("phi0")
    @classmethod
    def _check_phi0(cls, value: str) -> str:
        parts = value.split(":")
        if parts[0] == "linear" and len(parts) in (2, 3):
            return value
        if parts[0] == "quadratic" and len(parts) == 2:
            return value
        raise ValueError("expected linear:<slope>:<offset> or quadratic:<diag>")


class InteractionSettings(_Section):
    """Interaction approximation."""
    kind: Literal["none", "gaussian", "dm", "de"] = Field("gaussian", description="Estimator family")
    epsilon: Optional[float] = Field(None, gt=0, description="Kernel bandwidth for dm / de")
    jitter: Optional[float] = Field(None, ge=0, description="Covariance regularization for gaussian")

    @model_validator(mode="after")
    def _epsilon_required(self) -> "InteractionSettings":
        if self.kind in ("dm", "de") and self.epsilon is None:
            raise ValueError(f"interaction kind {self.kind} requires epsilon")
        return self


class DynamicsSettings(_Section):
    """Sampler and integration settings."""
    kind: Literal["accelerated", "nesterov", "mcmc", "hmcmc", "first_order_det", "damped_flow"] = "accelerated"
    dt: float = Field(0.1, gt=0, description="Step size")
    K: int = Field(400, ge=1, description="Number of iterations")
    gamma_friction: float = Field(2.0, gt=0, description="Friction of underdamped Langevin and the damped flow")
    x_update: Literal["paper", "halfstep"] = Field("paper", description="Momentum used in the position drift")
    v0_scale: float = Field(0.0, ge=0,
                            description="Std of the N(0, v0_scale^2) initial velocities (hmcmc, damped_flow)")


class MetricsSettings(_Section):
    """Per-iteration diagnostics."""
    kl: Literal["gaussian_fit", "kde", "none"] = Field("gaussian_fit", description="KL estimator")
    kde_bandwidth: Optional[float] = Field(None, gt=0, description="Fixed KDE bandwidth; overrides kde_rule")
    kde_rule: Literal["silverman", "component"] = Field(
        "silverman", description="KDE bandwidth rule: pooled rule of thumb or sized to the target components")
    observable: Literal["half_rectified_identity", "mean", "second_moment"] = "half_rectified_identity"
    lyapunov: bool = Field(True, description="Record the Lyapunov energy (1-d Gaussian targets)")


class OutputSettings(_Section):
    """Output files."""
    traces: bool = Field(False, description="Write particle traces (d=1)")
    wall_time: bool = Field(True, description="Write wall_nanos; disable for byte-identical reruns")


class ComparisonSettings(_Section):
    """Grids for the sampler comparison."""
    methods: List[Literal["accelerated_dm", "accelerated_de", "mcmc", "hmcmc"]] = Field(
        default_factory=lambda: ["accelerated_dm", "accelerated_de", "mcmc", "hmcmc"])
    n_grid: List[int] = Field(default_factory=lambda: [250, 500, 1000, 2000])
    eps_grid: List[float] = Field(default_factory=lambda: [1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0])
    grid_runs: int = Field(10, ge=1, description="Seeds used for the N and epsilon grids")

    _split = field_validator("methods", "n_grid", "eps_grid", mode="before")(_split_list)

    @field_validator("n_grid")
    @classmethod
    def _positive_n(cls, value: List[int]) -> List[int]:
        if not value or any(n < 1 for n in value):
            raise ValueError("n_grid entries must be >= 1")
        return value

    @field_validator("eps_grid")
    @classmethod
    def _positive_eps(cls, value: List[float]) -> List[float]:
        if not value or any(e <= 0 for e in value):
            raise ValueError("eps_grid entries must be > 0")
        return value


class ExperimentConfig(_Section):
    """Fully resolved experiment configuration."""
    preset: Literal["gaussian_fig1", "mixture_fig2", "comparison_fig3", "custom"] = "custom"
    N: int = Field(100, ge=1, description="Number of particles")
    seeds: List[int] = Field(default_factory=lambda: [0], description="Run seeds")
    master_seed: Optional[int] = Field(None, ge=0, description="Master seed the run seeds were derived from")
    runs: Optional[int] = Field(None, ge=1, description="Number of seeds derived from master_seed")
    output_dir: Path = Field(Path("results"), description="Output directory")
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    target: TargetSettings = Field(default_factory=TargetSettings)
    init: InitSettings = Field(default_factory=InitSettings)
    interaction: InteractionSettings = Field(default_factory=InteractionSettings)
    dynamics: DynamicsSettings = Field(default_factory=DynamicsSettings)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    comparison: ComparisonSettings = Field(default_factory=ComparisonSettings)

    _split = field_validator("seeds", mode="before")(_split_list)

    @field_validator("seeds")
    @classmethod
    def _non_empty_seeds(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in value):
            raise ValueError("seeds must be non-negative")
        return value

    def to_flat(self) -> Dict[str, str]:
        """Flatten to dotted `key -> value` strings, the on-disk config format."""
        flat: Dict[str, str] = {}

        def visit(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for key, item in value.items():
                    visit(f"{prefix}.{key}" if prefix else key, item)
            elif isinstance(value, list):
                flat[prefix] = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                return
            elif isinstance(value, float):
                flat[prefix] = repr(value)
            elif isinstance(value, bool):
                flat[prefix] = "true" if value else "false"
            else:
                flat[prefix] = str(value)

        visit("", self.model_dump(mode="python"))
        return flat

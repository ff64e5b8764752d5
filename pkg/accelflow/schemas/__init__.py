from accelflow.schemas.experiment import (
    ComparisonSettings,
    DynamicsSettings,
    ExperimentConfig,
    InitSettings,
    InteractionSettings,
    MetricsSettings,
    OutputSettings,
    ScheduleSettings,
    TargetSettings,
)

__all__ = [
    "ComparisonSettings",
    "DynamicsSettings",
    "ExperimentConfig",
    "InitSettings",
    "InteractionSettings",
    "MetricsSettings",
    "OutputSettings",
    "ScheduleSettings",
    "TargetSettings",
]

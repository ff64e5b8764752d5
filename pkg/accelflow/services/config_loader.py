"""
Experiment configuration loading.

Configuration files are flat `key = value` text with dotted keys mirroring the
module namespaces (`schedule.C = 0.625`). Layers are applied in order:
defaults, preset, file, `--set` overrides, command-line seed/output flags.
The result is validated once and fully resolved before any run starts.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from pydantic import ValidationError

from accelflow import __version__
from accelflow.core.config import settings
from accelflow.core.errors import ConfigError
from accelflow.core.targets import derive_seeds
from accelflow.schemas.experiment import ExperimentConfig
from accelflow.services.sampler_factory import check_consistency

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.txt"
RESOLVED_METADATA_FILE = "resolved_config.json"

# Flat overrides applied on top of the model defaults.
PRESETS: Dict[str, Dict[str, str]] = {
    "gaussian_fig1": {
        "N": "100",
        "seeds": "0",
        "schedule.p": "2",
        "schedule.C": "0.625",
        "schedule.t0": "1",
        "target.kind": "gaussian",
        "target.mean": "-5",
        "target.cov": "0.25",
        "init.mean": "2",
        "init.cov": "4",
        "init.phi0": "linear:0.5:-1",
        "interaction.kind": "gaussian",
        "dynamics.kind": "accelerated",
        "dynamics.x_update": "halfstep",
        "dynamics.dt": "0.1",
        "dynamics.K": "400",
        "metrics.kl": "gaussian_fit",
        "metrics.lyapunov": "true",
    },
    "mixture_fig2": {
        "N": "100",
        "seeds": "0",
        "schedule.p": "2",
        "schedule.C": "0.625",
        "schedule.t0": "1",
        "target.kind": "mixture",
        "target.m": "2.0",
        "target.sigma2": "0.8",
        "init.mean": "2",
        "init.cov": "4",
        "init.phi0": "linear:0.5:-1",
        "interaction.kind": "dm",
        "interaction.epsilon": "0.01",
        "dynamics.kind": "accelerated",
        "dynamics.x_update": "halfstep",
        "dynamics.dt": "0.1",
        "dynamics.K": "400",
        "metrics.kl": "kde",
        "metrics.kde_rule": "component",
        "metrics.lyapunov": "false",
    },
    "comparison_fig3": {
        "N": "100",
        "master_seed": "0",
        "runs": "100",
        "schedule.p": "2",
        "schedule.C": "0.625",
        "schedule.t0": "1",
        "target.kind": "mixture",
        "target.m": "2.0",
        "target.sigma2": "0.8",
        "init.mean": "2",
        "init.cov": "4",
        "init.phi0": "linear:0.5:-1",
        "interaction.kind": "dm",
        "interaction.epsilon": "0.01",
        "dynamics.kind": "accelerated",
        "dynamics.x_update": "halfstep",
        "dynamics.dt": "0.1",
        "dynamics.K": "1000",
        "metrics.kl": "none",
        "metrics.lyapunov": "false",
        "metrics.observable": "half_rectified_identity",
        "comparison.n_grid": "250,500,1000,2000",
        "comparison.eps_grid": "0.001,0.003,0.01,0.03,0.1,0.3,1,3,10",
        "comparison.grid_runs": "10",
    },
    "custom": {},
}

# Choices the experiment descriptions leave open; recorded in every metadata sidecar.
IMPLEMENTATION_CHOICES = {
    "comparison_fig3": {
        "initial_law": "N(2, 4) with phi0 linear:0.5:-1, as in gaussian_fig1",
        "n_grid": "250,500,1000,2000",
        "baseline_samples": "N parallel chains of length K",
        "position_drift": "halfstep (leapfrog Y_{k+1/2}); the Y_k drift expands phase-space volume every step",
        "hmcmc_law": "sqrt(2) noise with friction gamma samples exp(-gamma (f + v^2/2)), "
                     "a law tempered by 1/gamma in position",
    },
    "mixture_fig2": {
        "kl_estimator": "Gaussian KDE, bandwidth 1.06 sigma_c (N/2)^(-1/5) from the component scale",
        "position_drift": "halfstep (leapfrog Y_{k+1/2}); the Y_k drift expands phase-space volume every step",
    },
    "gaussian_fig1": {
        "kl_estimator": "Gaussian fit",
        "position_drift": "halfstep (leapfrog Y_{k+1/2}); the Y_k drift expands phase-space volume every step",
    },
}

_SEED_KEYS = {"seeds"}
_MASTER_KEYS = {"master_seed", "runs"}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """
    Parse flat `key = value` lines; `#` starts a comment.

    Raises:
        ConfigError: For a line without `=` or an empty key; the key path is
            `<source>:<line number>`.
    """
    entries: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got '{raw.strip()}'", key_path=f"{source}:{number}")
        entries[key] = value.strip()
    return entries


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e.strerror or e}", key_path=str(path)) from e
    return parse_config_text(text, source=str(path))


def parse_override(item: str) -> Dict[str, str]:
    """Parse one `--set key=value` argument."""
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got '{item}'", key_path="--set")
    return {key.strip(): value.strip()}


def _merge(merged: Dict[str, str], layer: Mapping[str, str]) -> None:
    # explicit seeds and (master_seed, runs) replace each other across layers
    if _SEED_KEYS & layer.keys() and not _MASTER_KEYS & layer.keys():
        for key in _MASTER_KEYS:
            merged.pop(key, None)
    if _MASTER_KEYS & layer.keys() and not _SEED_KEYS & layer.keys():
        merged.pop("seeds", None)
    merged.update(layer)


def _nest(flat: Mapping[str, str]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for i, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError("is a value, not a section", key_path=".".join(parts[:i + 1]))
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError("is a section, not a value", key_path=key)
        node[parts[-1]] = value
    return nested


def _resolve_seeds(flat: Dict[str, str]) -> None:
    if "seeds" in flat:
        return
    if "master_seed" not in flat:
        return
    try:
        master = int(flat["master_seed"])
        runs = int(flat.get("runs", "1"))
    except ValueError as e:
        raise ConfigError(f"must be an integer: {e}", key_path="master_seed") from e
    if master < 0:
        raise ConfigError("must be >= 0", key_path="master_seed")
    if runs < 1:
        raise ConfigError("must be >= 1", key_path="runs")
    flat["seeds"] = ",".join(str(s) for s in derive_seeds(master, runs))


def _validation_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    key_path = ".".join(str(part) for part in first["loc"]) or "config"
    message = first["msg"]
    if first["type"] == "extra_forbidden":
        message = "unknown key"
    logger.debug(f"configuration rejected with {error.error_count()} error(s): {error}")
    return ConfigError(message, key_path=key_path)


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                overrides: Iterable[str] = (), seeds: Optional[Sequence[int]] = None,
                master_seed: Optional[int] = None, runs: Optional[int] = None,
                output_dir: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Build the resolved ExperimentConfig.

    Args:
        path: Optional flat config file.
        preset: Preset name; a `preset` key in the file is used when omitted.
        overrides: `key=value` strings applied after the file.
        seeds: Explicit seeds (take precedence over master_seed/runs).
        master_seed: Master seed for derived run seeds.
        runs: Number of derived run seeds.
        output_dir: Output directory; defaults to ACCELFLOW_OUTPUT_DIR.

    Returns:
        ExperimentConfig: Validated configuration with seeds resolved.

    Raises:
        ConfigError: Unknown key, invariant violation or unreadable file, naming
            the offending key path.
    """
    file_layer = read_config_file(path) if path is not None else {}
    preset = preset or file_layer.get("preset") or "custom"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (expected one of {', '.join(PRESETS)})", key_path="preset")

    merged: Dict[str, str] = {"output_dir": settings.OUTPUT_DIR}
    _merge(merged, PRESETS[preset])
    _merge(merged, file_layer)
    for item in overrides:
        _merge(merged, parse_override(item))

    flags: Dict[str, str] = {"preset": preset}
    if seeds is not None:
        flags["seeds"] = ",".join(str(s) for s in seeds)
    if master_seed is not None:
        flags["master_seed"] = str(master_seed)
    if runs is not None:
        flags["runs"] = str(runs)
    if output_dir is not None:
        flags["output_dir"] = str(output_dir)
    _merge(merged, flags)
    _resolve_seeds(merged)

    try:
        cfg = ExperimentConfig.model_validate(_nest(merged))
    except ValidationError as e:
        raise _validation_error(e) from e

    problems = check_consistency(cfg)
    if problems:
        key_path, message = problems[0]
        raise ConfigError(message, key_path=key_path)
    logger.info(f"Loaded configuration preset={cfg.preset} N={cfg.N} K={cfg.dynamics.K} "
                f"seeds={len(cfg.seeds)} digest={config_digest(cfg)}")
    return cfg


def render_config(cfg: ExperimentConfig) -> str:
    """The resolved configuration in the flat file format, keys sorted."""
    flat = cfg.to_flat()
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()[:12]


def config_metadata(cfg: ExperimentConfig) -> Dict[str, Any]:
    return {
        "version": __version__,
        "config_digest": config_digest(cfg),
        "config": cfg.to_flat(),
        "seeds": list(cfg.seeds),
        "master_seed": cfg.master_seed,
        "implementation_choices": IMPLEMENTATION_CHOICES.get(cfg.preset, {}),
    }


def write_resolved(cfg: ExperimentConfig, directory: Optional[Union[str, Path]] = None) -> List[Path]:
    """
    Write `resolved_config.txt` and its JSON sidecar into the output directory.

    Loading the written text file reproduces `cfg` exactly.
    """
    directory = Path(directory or cfg.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    text_path = directory / RESOLVED_CONFIG_FILE
    text_path.write_text(render_config(cfg), encoding="utf-8")
    json_path = directory / RESOLVED_METADATA_FILE
    json_path.write_text(json.dumps(config_metadata(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote resolved configuration to {text_path}")
    return [text_path, json_path]

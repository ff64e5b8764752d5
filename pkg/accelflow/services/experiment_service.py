"""
Experiment orchestration: per-seed runs, the sampler comparison and
parameter sweeps.

Independent (method, value, seed) jobs run on a bounded thread pool. Results
are folded in submission order, so every output file is independent of the
worker count and of completion order.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import ValidationError

from accelflow.core.config import settings
from accelflow.core.dynamics import run_sampler
from accelflow.core.errors import ConfigError
from accelflow.core.interaction import Ensemble
from accelflow.core.metrics import MseAccumulator, RunRecord, wall_time_per_iteration
from accelflow.core.targets import Observable
from accelflow.schemas.experiment import ExperimentConfig
from accelflow.services.config_loader import config_digest, config_metadata, write_resolved
from accelflow.services.export_service import ExportService
from accelflow.services.sampler_factory import (
    build_record_builder,
    build_sampler,
    build_target,
    initial_ensemble,
    method_config,
    observable_truth,
)

logger = logging.getLogger(__name__)

SWEEP_AXES = ("N", "K", "epsilon")
SWEEP_COLUMNS = ["value", "iter", "t", "mse", "kl", "mean_nanos", "runs", "error"]
MSE_VS_K_COLUMNS = ["method", "iter", "t", "mse", "runs", "error"]
MSE_VS_N_COLUMNS = ["method", "N", "mse", "runs", "error"]
MSE_VS_EPS_COLUMNS = ["method", "epsilon", "mse", "runs", "error"]
TIME_VS_N_COLUMNS = ["method", "N", "mean_nanos", "p50_nanos", "p95_nanos", "runs", "error"]
KERNEL_METHODS = ("accelerated_dm", "accelerated_de")


@dataclass
class Job:
    """One sampler run: a resolved configuration and a seed."""
    cfg: ExperimentConfig
    seed: int
    method: str = ""
    value: Optional[float] = None
    keep_traces: bool = False

    @property
    def label(self) -> str:
        parts = [self.method or self.cfg.dynamics.kind]
        if self.value is not None:
            parts.append(f"value={self.value:g}")
        parts.append(f"seed={self.seed}")
        return " ".join(parts)


@dataclass
class JobResult:
    job: Job
    status: str
    records: List[RunRecord] = field(default_factory=list)
    estimates: List[float] = field(default_factory=list)
    trace_times: List[float] = field(default_factory=list)
    trace_positions: List[np.ndarray] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.status == "failed"


@dataclass
class ExperimentSummary:
    """Outcome of run_experiment / sweep; exit_status is 1 iff some job failed."""
    results: List[JobResult] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)

    @property
    def failures(self) -> List[JobResult]:
        return [r for r in self.results if r.failed]

    @property
    def exit_status(self) -> int:
        return 1 if self.failures else 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": "partial" if self.failures else "completed",
            "exit_status": self.exit_status,
            "total_runs": len(self.results),
            "failed_runs": len(self.failures),
            "runs": [
                {
                    "method": r.job.method or r.job.cfg.dynamics.kind,
                    "value": r.job.value,
                    "seed": r.job.seed,
                    "status": r.status,
                    "error": r.error,
                }
                for r in self.results
            ],
            "files": sorted(p.name for p in self.files),
        }


def run_job(job: Job, truth: Optional[float] = None) -> JobResult:
    """
    Run one sampler for K iterations and collect its records.

    Errors propagate to the caller, which records the job as failed.
    """
    cfg = job.cfg
    target = build_target(cfg)
    truth = observable_truth(cfg, target) if truth is None else truth
    observable = Observable(cfg.metrics.observable)
    sampler = build_sampler(cfg, target, job.seed)
    initial = initial_ensemble(cfg, job.seed)
    result = JobResult(job=job, status="completed")

    def observe(record: RunRecord, ens: Ensemble) -> None:
        result.estimates.append(float(np.mean(observable.evaluate(ens.positions))))

    def trace(iteration: int, ens: Ensemble) -> None:
        result.trace_times.append(ens.time)
        result.trace_positions.append(ens.positions[:, 0].copy())

    if job.keep_traces:
        trace(0, initial)
    hooks = [build_record_builder(cfg, target, truth), observe]
    logger.info(f"Starting run {job.label} ({sampler.name}, N={cfg.N}, K={cfg.dynamics.K})")
    records = run_sampler(sampler, initial, cfg.dynamics.K, hooks, config_digest=config_digest(cfg),
                          on_state=trace if job.keep_traces else None)
    for record in records:
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"{job.label} iter={record.iteration} t={record.time_t:.4g} kl={record.kl_estimate} "
                         f"mse={record.mse_contrib}")
        result.records.append(record)
    logger.info(f"Finished run {job.label}")
    return result


class ExperimentService:
    """
    Runs experiments described by an ExperimentConfig and writes their outputs.

    Args:
        cfg: Resolved configuration.
        max_workers: Worker pool size; defaults to ACCELFLOW_MAX_WORKERS.
    """

    def __init__(self, cfg: ExperimentConfig, max_workers: Optional[int] = None):
        self.cfg = cfg
        self.max_workers = max(1, max_workers or settings.MAX_WORKERS)
        self.export = ExportService(cfg.output_dir)
        self._truths: Dict[Tuple[str, ...], float] = {}

    def _truth(self, cfg: ExperimentConfig) -> float:
        key = (repr(cfg.target.model_dump()), cfg.metrics.observable)
        if key not in self._truths:
            self._truths[key] = observable_truth(cfg, build_target(cfg))
        return self._truths[key]

    def _execute(self, jobs: Sequence[Job]) -> List[JobResult]:
        """Run jobs on the pool; results come back in submission order."""
        results = []
        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            futures = [executor.submit(run_job, job, self._truth(job.cfg)) for job in jobs]
            for job, future in zip(jobs, futures):
                try:
                    results.append(future.result())
                except Exception as e:
                    logger.error(f"Error in run {job.label}: {str(e)}")
                    results.append(JobResult(job=job, status="failed", error=f"{type(e).__name__}: {e}"))
        return results

    def run_experiment(self) -> ExperimentSummary:
        """
        Run every seed of the configuration.

        Writes `<preset>_<seed>.csv` with a metadata sidecar per seed (traces
        when enabled); the comparison preset additionally writes
        mse_vs_K.csv, mse_vs_N.csv, mse_vs_eps.csv and time_vs_N.csv.

        Returns:
            ExperimentSummary: Per-run status and written files.
        """
        cfg = self.cfg
        summary = ExperimentSummary(files=write_resolved(cfg))
        if cfg.preset == "comparison_fig3":
            self._run_comparison(summary)
        else:
            jobs = [Job(cfg, seed, keep_traces=cfg.output.traces) for seed in cfg.seeds]
            results = self._execute(jobs)
            for result in results:
                summary.files.extend(self._export_run(result, f"{cfg.preset}_{result.job.seed}"))
            summary.results.extend(results)
        summary.files.append(self.export.export_metadata(summary.to_dict(), "summary.json"))
        self._log_outcome(summary)
        return summary

    def _export_run(self, result: JobResult, name: str) -> List[Path]:
        if result.failed:
            return []
        cfg = result.job.cfg
        files = [self.export.export_records(result.records, name, wall_time=cfg.output.wall_time)]
        metadata = config_metadata(cfg)
        metadata.update({
            "seed": result.job.seed,
            "method": result.job.method or cfg.dynamics.kind,
            "scheme": result.records[0].scheme if result.records else "",
            "kl_estimator": cfg.metrics.kl,
            "observable_truth": self._truth(cfg),
        })
        files.append(self.export.export_metadata(metadata, f"{name}.json"))
        if result.job.keep_traces:
            files.append(self.export.export_traces(result.trace_times, result.trace_positions, name))
        return files

    def _run_comparison(self, summary: ExperimentSummary) -> None:
        cfg = self.cfg
        methods = list(cfg.comparison.methods)
        grid_seeds = list(cfg.seeds[:cfg.comparison.grid_runs])

        k_jobs = [Job(method_config(cfg, m), seed, method=m) for m in methods for seed in cfg.seeds]
        n_jobs = [
            Job(method_config(cfg, m).model_copy(update={"N": n}), seed, method=m, value=n)
            for m in methods for n in cfg.comparison.n_grid for seed in grid_seeds
        ]
        eps_jobs = [
            Job(self._with_epsilon(method_config(cfg, m), eps), seed, method=m, value=eps)
            for m in methods if m in KERNEL_METHODS
            for eps in cfg.comparison.eps_grid for seed in grid_seeds
        ]
        k_results = self._execute(k_jobs)
        n_results = self._execute(n_jobs)
        eps_results = self._execute(eps_jobs)
        summary.results.extend(k_results + n_results + eps_results)

        for result in k_results:
            summary.files.extend(self._export_run(result, f"{cfg.preset}_{result.job.method}_{result.job.seed}"))

        k_rows = []
        for method in methods:
            group = [r for r in k_results if r.job.method == method]
            k_rows.extend(self._per_iteration_rows(group, {"method": method}))
        summary.files.append(self.export.export_table(k_rows, MSE_VS_K_COLUMNS, "mse_vs_K.csv"))

        n_rows, time_rows = [], []
        for method in methods:
            for n in cfg.comparison.n_grid:
                group = [r for r in n_results if r.job.method == method and r.job.value == n]
                n_rows.append({"method": method, "N": n, **self._final_row(group)})
                time_rows.append({"method": method, "N": n, **self._timing_row(group)})
        summary.files.append(self.export.export_table(n_rows, MSE_VS_N_COLUMNS, "mse_vs_N.csv"))
        if cfg.output.wall_time:
            summary.files.append(self.export.export_table(time_rows, TIME_VS_N_COLUMNS, "time_vs_N.csv"))
        else:
            logger.info("output.wall_time is false; time_vs_N.csv not written")

        eps_rows = []
        for method in [m for m in methods if m in KERNEL_METHODS]:
            for eps in cfg.comparison.eps_grid:
                group = [r for r in eps_results if r.job.method == method and r.job.value == eps]
                eps_rows.append({"method": method, "epsilon": eps, **self._final_row(group)})
        summary.files.append(self.export.export_table(eps_rows, MSE_VS_EPS_COLUMNS, "mse_vs_eps.csv"))

    def sweep(self, axis: str, values: Sequence[float]) -> ExperimentSummary:
        """
        Run every seed once per value of `axis`, everything else held fixed.

        Writes `sweep_<axis>.csv`: one row per value at the final iteration for
        N and epsilon, one row per iteration k <= value for K. Values whose
        runs all failed keep a row with only `value` and `error` filled.

        Raises:
            ConfigError: Empty values, unknown axis or a value invalid on the axis.
        """
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis '{axis}' (expected one of {', '.join(SWEEP_AXES)})",
                              key_path="--axis")
        if not values:
            raise ConfigError("at least one sweep value is required", key_path="--values")
        configs = [self._with_value(axis, v) for v in values]

        summary = ExperimentSummary(files=write_resolved(self.cfg))
        jobs = [Job(c, seed, value=v) for v, c in zip(values, configs) for seed in self.cfg.seeds]
        results = self._execute(jobs)
        summary.results.extend(results)

        rows = []
        for value in values:
            group = [r for r in results if r.job.value == value]
            if axis == "K":
                per_k = self._per_iteration_rows(group, {"value": value}, with_kl=True)
                timing = self._timing_row(group)
                rows.extend({**row, "mean_nanos": timing.get("mean_nanos")} for row in per_k)
            else:
                rows.append({"value": value, **self._final_row(group, with_kl=True),
                             "mean_nanos": self._timing_row(group).get("mean_nanos")})
        summary.files.append(self.export.export_table(rows, SWEEP_COLUMNS, f"sweep_{axis}.csv"))
        summary.files.append(self.export.export_metadata(summary.to_dict(), "summary.json"))
        self._log_outcome(summary)
        return summary

    def _with_value(self, axis: str, value: float) -> ExperimentConfig:
        data = self.cfg.model_dump()
        if axis == "N":
            data["N"] = value
            key_path = "N"
        elif axis == "K":
            data["dynamics"]["K"] = value
            key_path = "dynamics.K"
        else:
            if self.cfg.interaction.kind not in ("dm", "de"):
                raise ConfigError(f"epsilon sweep needs a kernel interaction, got {self.cfg.interaction.kind}",
                                  key_path="interaction.kind")
            data["interaction"]["epsilon"] = value
            key_path = "interaction.epsilon"
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid sweep value {value}: {e.errors()[0]['msg']}", key_path=key_path) from e

    @staticmethod
    def _with_epsilon(cfg: ExperimentConfig, epsilon: float) -> ExperimentConfig:
        interaction = cfg.interaction.model_copy(update={"epsilon": epsilon})
        return cfg.model_copy(update={"interaction": interaction})

    @staticmethod
    def _errors(group: Sequence[JobResult]) -> Optional[str]:
        failed = [r for r in group if r.failed]
        if not failed:
            return None
        return "; ".join(f"seed {r.job.seed}: {r.error}" for r in failed)

    def _per_iteration_rows(self, group: Sequence[JobResult], key: Dict[str, Any],
                            with_kl: bool = False) -> List[Dict[str, Any]]:
        ok = [r for r in group if not r.failed]
        error = self._errors(group)
        if not ok:
            return [{**key, "error": error}]
        truth = self._truth(ok[0].job.cfg)
        rows = []
        for k in range(len(ok[0].records)):
            acc = MseAccumulator(truth)
            for r in ok:
                acc.add(r.estimates[k])
            row = {**key, "iter": ok[0].records[k].iteration, "t": ok[0].records[k].time_t,
                   "mse": acc.mse(), "runs": len(ok), "error": error}
            if with_kl:
                row["kl"] = self._mean_kl([r.records[k] for r in ok])
            rows.append(row)
        return rows

    def _final_row(self, group: Sequence[JobResult], with_kl: bool = False) -> Dict[str, Any]:
        ok = [r for r in group if not r.failed]
        row: Dict[str, Any] = {"error": self._errors(group)}
        if not ok:
            return row
        acc = MseAccumulator(self._truth(ok[0].job.cfg))
        for r in ok:
            acc.add(r.estimates[-1])
        row.update({"mse": acc.mse(), "runs": len(ok)})
        if with_kl:
            last = ok[0].records[-1]
            row.update({"iter": last.iteration, "t": last.time_t,
                        "kl": self._mean_kl([r.records[-1] for r in ok])})
        return row

    def _timing_row(self, group: Sequence[JobResult]) -> Dict[str, Any]:
        ok = [r for r in group if not r.failed and len(r.records) >= 2]
        row: Dict[str, Any] = {"error": self._errors(group)}
        if not ok or not self.cfg.output.wall_time:
            return row
        summaries = [wall_time_per_iteration(r.records) for r in ok]
        row.update({
            "mean_nanos": float(np.mean([s.mean_nanos for s in summaries])),
            "p50_nanos": float(np.median([s.p50_nanos for s in summaries])),
            "p95_nanos": float(np.median([s.p95_nanos for s in summaries])),
            "runs": len(ok),
        })
        return row

    @staticmethod
    def _mean_kl(records: Sequence[RunRecord]) -> Optional[float]:
        values = [r.kl_estimate for r in records]
        if any(v is None for v in values):
            return None
        return float(np.mean(values))

    @staticmethod
    def _log_outcome(summary: ExperimentSummary) -> None:
        if summary.failures:
            logger.error(f"{len(summary.failures)} of {len(summary.results)} runs failed")
        else:
            logger.info(f"All {len(summary.results)} runs completed")


def run_experiment(cfg: ExperimentConfig, max_workers: Optional[int] = None) -> int:
    """Run the configured experiment; returns the exit status (0 success, 1 partial failure)."""
    return ExperimentService(cfg, max_workers).run_experiment().exit_status


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float], max_workers: Optional[int] = None) -> int:
    """Sweep one axis; returns the exit status (0 success, 1 partial failure)."""
    return ExperimentService(cfg, max_workers).sweep(axis, values).exit_status

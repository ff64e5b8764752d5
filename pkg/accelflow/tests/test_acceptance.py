"""
End-to-end checks of the convergence, comparison and complexity behaviour of
the samplers. Everything here is marked slow; run with `pytest -m slow`.
"""
import numpy as np
import pytest

from accelflow.core.dynamics import MomentumUpdate, run_nesterov, run_sampler
from accelflow.core.metrics import (
    MseAccumulator,
    kl_gaussian_fit,
    kl_kde,
    loglog_slope,
    lyapunov_energy,
    rate_slope,
    upper_envelope,
    wall_time_per_iteration,
)
from accelflow.core.schedule import ScalingSchedule
from accelflow.core.targets import GaussianTarget
from accelflow.services.config_loader import load_config
from accelflow.services.experiment_service import Job, run_job
from accelflow.services.sampler_factory import (
    build_sampler,
    build_schedule,
    build_target,
    initial_ensemble,
    method_config,
    observable_truth,
)

pytestmark = pytest.mark.slow

SEEDS = list(range(10))


def final_mse(cfg, method, seeds):
    """m.s.e. of the observable at the last iteration over seed-matched runs of one method."""
    mc = method_config(cfg, method)
    acc = MseAccumulator(observable_truth(mc, build_target(mc)))
    for seed in seeds:
        acc.add(run_job(Job(mc, seed, method=method), acc.truth).estimates[-1])
    return acc.mse()


def test_quadratic_rate_of_the_nesterov_ode():
    """The objective gap decays like t^-2 on a quadratic potential."""
    target = GaussianTarget([-5.0], [[0.25]])
    schedule = ScalingSchedule(p=2.0, C=0.625, t0=1.0)
    t, x, _ = run_nesterov(np.array([2.0]), np.array([0.5]), schedule, target, 0.01, 4900, MomentumUpdate.HALF_STEP)
    gap = 0.5 * (x[:, 0] + 5.0) ** 2 / 0.25
    slope = rate_slope(zip(t, upper_envelope(gap)), (10.0, 40.0))
    assert slope <= -1.7


def test_mean_field_mean_matches_the_nesterov_ode(tmp_path):
    """With the Gaussian interaction the ensemble mean follows the Nesterov ODE."""
    errors = {}
    for n in [100, 1000, 10_000]:
        cfg = load_config(preset="gaussian_fig1", overrides=[f"N={n}", "metrics.kl=none"], output_dir=tmp_path)
        target, schedule = build_target(cfg), build_schedule(cfg)
        drift = MomentumUpdate(cfg.dynamics.x_update)
        per_seed = []
        for seed in range(5):
            initial = initial_ensemble(cfg, seed)
            means = [float(initial.positions.mean())]
            for _ in run_sampler(build_sampler(cfg, target, seed), initial, cfg.dynamics.K,
                                 on_state=lambda k, ens: means.append(float(ens.positions.mean()))):
                pass
            _, population, _ = run_nesterov(np.array([2.0]), np.array([0.5]), schedule, target, 0.1, cfg.dynamics.K,
                                            drift)
            _, matched, _ = run_nesterov(initial.positions.mean(axis=0), np.array([0.5]), schedule, target, 0.1,
                                         cfg.dynamics.K, drift)
            per_seed.append(np.max(np.abs(np.asarray(means) - population[:, 0])))
            assert np.max(np.abs(np.asarray(means) - matched[:, 0])) < 0.05
        errors[n] = float(np.mean(per_seed))
    assert all(np.isfinite(list(errors.values())))
    assert errors[100] > errors[1000] > errors[10_000]


def test_gaussian_run_reaches_the_target_at_the_predicted_rate(tmp_path):
    cfg = load_config(preset="gaussian_fig1", output_dir=tmp_path)
    initial_kl = kl_gaussian_fit(initial_ensemble(cfg, 0).positions, build_target(cfg))
    assert initial_kl == pytest.approx(104.1, rel=0.3)

    finals, good_rates = [], 0
    for seed in SEEDS:
        records = run_job(Job(cfg, seed)).records
        kl = [r.kl_estimate for r in records]
        finals.append(kl[-1])
        series = zip([r.time_t for r in records], upper_envelope(kl))
        if rate_slope(series, (5.0, 40.0)) <= -1.7:
            good_rates += 1
    assert np.median(finals) < 1e-2
    assert good_rates >= 8


def _worst_lyapunov_increase(cfg, seed):
    target, schedule = build_target(cfg), build_schedule(cfg)
    initial = initial_ensemble(cfg, seed)
    v0 = lyapunov_energy(initial, schedule, target, kl_gaussian_fit(initial.positions, target))
    values = [v0] + [r.lyapunov for r in run_job(Job(cfg, seed)).records]
    return float(np.max(np.diff(values))), v0


def test_lyapunov_energy_is_non_increasing(tmp_path):
    coarse = load_config(preset="gaussian_fig1", output_dir=tmp_path)
    fine = load_config(preset="gaussian_fig1", overrides=["dynamics.dt=0.05", "dynamics.K=800"], output_dir=tmp_path)
    for seed in SEEDS:
        worst, v0 = _worst_lyapunov_increase(coarse, seed)
        assert worst <= 0.02 * v0
        worst_fine, _ = _worst_lyapunov_increase(fine, seed)
        if worst > 1e-12 * v0:
            assert worst_fine <= 0.7 * worst


def test_mixture_run_populates_both_modes(tmp_path):
    cfg = load_config(preset="mixture_fig2", output_dir=tmp_path)
    target = build_target(cfg)
    good = 0
    for seed in SEEDS:
        result = run_job(Job(cfg, seed, keep_traces=True))
        first, last = result.trace_positions[0], result.trace_positions[-1]
        positive = float(np.mean(last > 0))
        rule = cfg.metrics.kde_rule
        dropped = kl_kde(last, target, rule=rule) <= kl_kde(first, target, rule=rule) / 10.0
        if 0.35 <= positive <= 0.65 and dropped:
            good += 1
    assert good >= 8


@pytest.mark.parametrize("master_seed", [0, 1, 2])
def test_accelerated_diffusion_map_beats_langevin_baselines(tmp_path, master_seed):
    cfg = load_config(preset="comparison_fig3", master_seed=master_seed, runs=100, output_dir=tmp_path)
    dm = final_mse(cfg, "accelerated_dm", cfg.seeds)
    mcmc = final_mse(cfg, "mcmc", cfg.seeds)
    hmcmc = final_mse(cfg, "hmcmc", cfg.seeds)
    assert dm < mcmc
    assert dm < hmcmc
    assert dm / mcmc < 0.5


def test_cost_per_iteration_scaling(tmp_path):
    """Kernel interactions cost O(N^2) per iteration, Langevin steps O(N)."""
    cfg = load_config(preset="comparison_fig3", seeds=[0], overrides=["dynamics.K=20"], output_dir=tmp_path)
    grid = [250, 500, 1000, 2000]
    slopes = {}
    for method in ["accelerated_dm", "mcmc"]:
        nanos = []
        for n in grid:
            mc = method_config(cfg, method).model_copy(update={"N": n})
            nanos.append(wall_time_per_iteration(run_job(Job(mc, 0, method=method)).records).p50_nanos)
        slopes[method] = loglog_slope(grid, nanos)
    assert 1.6 <= slopes["accelerated_dm"] <= 2.4
    assert slopes["mcmc"] <= 1.3


def test_bandwidth_error_is_u_shaped(tmp_path):
    cfg = load_config(preset="comparison_fig3", seeds=list(range(30)), output_dir=tmp_path)
    errors = {"accelerated_dm": [], "accelerated_de": []}
    for eps in cfg.comparison.eps_grid:
        interaction = cfg.interaction.model_copy(update={"epsilon": eps})
        at_eps = cfg.model_copy(update={"interaction": interaction})
        for method in errors:
            errors[method].append(final_mse(at_eps, method, cfg.seeds))
    dm, de = np.asarray(errors["accelerated_dm"]), np.asarray(errors["accelerated_de"])
    assert 0 < int(np.argmin(dm)) < len(dm) - 1
    assert dm.min() <= de.min()
    for end in (0, -1):
        assert abs(dm[end] - de[end]) <= 0.25 * max(dm[end], de[end])


def test_first_order_flow_matches_overdamped_langevin_marginals(tmp_path):
    overrides = ["N=2000", "target.mean=0", "target.cov=1", "dynamics.dt=0.01", "dynamics.K=200",
                 "metrics.kl=none"]
    flow = load_config(preset="gaussian_fig1", overrides=overrides + ["dynamics.kind=first_order_det"],
                       output_dir=tmp_path)
    langevin = load_config(preset="gaussian_fig1", overrides=overrides + ["dynamics.kind=mcmc"], output_dir=tmp_path)
    checkpoints = {50: 0.5, 100: 1.0, 200: 2.0}

    def moments(cfg, seed):
        target = build_target(cfg)
        out = {}

        def keep(k, ens):
            if k in checkpoints:
                out[k] = (float(ens.positions.mean()), float(ens.positions.var(ddof=1)))

        for _ in run_sampler(build_sampler(cfg, target, seed), initial_ensemble(cfg, seed), cfg.dynamics.K,
                             on_state=keep):
            pass
        return out

    seeds = range(50)
    a = [moments(flow, s) for s in seeds]
    b = [moments(langevin, s) for s in seeds]
    for k, t in checkpoints.items():
        for index in (0, 1):
            x = np.array([m[k][index] for m in a])
            y = np.array([m[k][index] for m in b])
            combined = np.sqrt(x.var(ddof=1) / x.size + y.var(ddof=1) / y.size)
            assert abs(x.mean() - y.mean()) <= 3 * combined, f"t={t} moment {index}"
